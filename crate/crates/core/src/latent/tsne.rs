//! Three-dimensional t-SNE: exact gradients for small inputs, Barnes-Hut
//! with a VP-tree neighbour graph above `exact_max`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::knn::knn;
use super::LatentError;
use crate::exec::Execution;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    /// `None` = `max(n / 12, 50)`.
    pub learning_rate: Option<f64>,
    pub momentum: f64,
    pub final_momentum: f64,
    pub theta: f64,
    /// Largest `n` that uses exact gradients.
    pub exact_max: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: None,
            momentum: 0.5,
            final_momentum: 0.8,
            theta: 0.5,
            exact_max: 1000,
            seed: 0,
        }
    }
}

impl TsneParams {
    pub fn learning_rate_for(&self, n: usize) -> f64 {
        self.learning_rate.unwrap_or((n as f64 / 12.0).max(50.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneOutput {
    pub coords: Vec<[f64; 3]>,
    /// `(iteration, KL(P || Q))`, starting at iteration 0 (the initial layout).
    pub kl_trace: Vec<(usize, f64)>,
    pub exact: bool,
}

const KL_EVERY: usize = 50;
const INIT_STD: f64 = 1e-4;

/// Sparse symmetric affinities `P`, stored per row (each pair appears in
/// both rows). Rows sum to the joint mass of that point.
struct Affinities {
    rows: Vec<Vec<(usize, f64)>>,
}

/// Gaussian conditional probabilities over `sq` (squared distances) with the
/// precision found by bisection so that the entropy equals `ln(perplexity)`.
fn conditional_row(sq: &[f64], perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut beta = 1.0;
    let min = sq.iter().copied().fold(f64::INFINITY, f64::min);
    let mut p = vec![0.0; sq.len()];
    for _ in 0..200 {
        let mut sum = 0.0;
        for (pi, &d) in p.iter_mut().zip(sq) {
            *pi = (-(d - min) * beta).exp();
            sum += *pi;
        }
        let mut h = 0.0;
        for (pi, &d) in p.iter_mut().zip(sq) {
            *pi /= sum;
            if *pi > 0.0 {
                h += beta * (d - min) * *pi;
            }
        }
        h += sum.ln();
        let diff = h - target;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

fn symmetrise(cond: Vec<Vec<(usize, f64)>>) -> Affinities {
    let n = cond.len();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, row) in cond.iter().enumerate() {
        for &(j, p) in row {
            rows[i].push((j, p));
            rows[j].push((i, p));
        }
    }
    let total = 2.0 * n as f64;
    for row in &mut rows {
        row.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for &(j, p) in row.iter() {
            match merged.last_mut() {
                Some(last) if last.0 == j => last.1 += p,
                _ => merged.push((j, p)),
            }
        }
        merged.iter_mut().for_each(|e| e.1 /= total);
        *row = merged;
    }
    Affinities { rows }
}

fn exact_affinities(points: &[f64], dim: usize, perplexity: f64, exec: Execution) -> Affinities {
    let n = points.len() / dim;
    let cond = exec.map_range(n, |i| {
        let xi = &points[i * dim..(i + 1) * dim];
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let sq: Vec<f64> = others
            .iter()
            .map(|&j| {
                let xj = &points[j * dim..(j + 1) * dim];
                xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum()
            })
            .collect();
        others.into_iter().zip(conditional_row(&sq, perplexity)).collect()
    });
    symmetrise(cond)
}

fn sparse_affinities(points: &[f64], dim: usize, perplexity: f64, exec: Execution) -> Affinities {
    let n = points.len() / dim;
    let k = ((3.0 * perplexity) as usize).min(n - 1);
    let neighbours = knn(points, dim, k, exec);
    let cond = exec.map_slice(&neighbours, |nb| {
        let sq: Vec<f64> = nb.iter().map(|&(_, d)| d * d).collect();
        nb.iter()
            .map(|&(j, _)| j)
            .zip(conditional_row(&sq, perplexity))
            .collect()
    });
    symmetrise(cond)
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum()
}

trait Repulsion {
    /// Unnormalised repulsive force and partial `Z` for point `i`.
    fn repulse(&self, y: &[[f64; 3]], i: usize) -> ([f64; 3], f64);
}

struct Exact;

impl Repulsion for Exact {
    fn repulse(&self, y: &[[f64; 3]], i: usize) -> ([f64; 3], f64) {
        let mut f = [0.0; 3];
        let mut z = 0.0;
        for (j, yj) in y.iter().enumerate() {
            if j == i {
                continue;
            }
            let q = 1.0 / (1.0 + sq_dist(&y[i], yj));
            z += q;
            for c in 0..3 {
                f[c] += q * q * (y[i][c] - yj[c]);
            }
        }
        (f, z)
    }
}

const NO_CHILD: u32 = u32::MAX;
const MAX_DEPTH: usize = 40;

struct Cell {
    centre: [f64; 3],
    half: f64,
    sum: [f64; 3],
    count: usize,
    children: [u32; 8],
    points: Vec<usize>,
    leaf: bool,
}

/// Barnes-Hut octree over the current layout.
struct Octree {
    cells: Vec<Cell>,
    theta: f64,
}

impl Octree {
    fn new(y: &[[f64; 3]], theta: f64) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in y {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let centre = [0, 1, 2].map(|c| (lo[c] + hi[c]) / 2.0);
        let half = (0..3).map(|c| hi[c] - lo[c]).fold(0.0, f64::max) / 2.0 + 1e-9;
        let mut tree = Octree {
            cells: vec![Octree::cell(centre, half)],
            theta,
        };
        for i in 0..y.len() {
            tree.insert(0, y, i, 0);
        }
        tree
    }

    fn cell(centre: [f64; 3], half: f64) -> Cell {
        Cell {
            centre,
            half,
            sum: [0.0; 3],
            count: 0,
            children: [NO_CHILD; 8],
            points: Vec::new(),
            leaf: true,
        }
    }

    fn octant(&self, cell: usize, p: &[f64; 3]) -> usize {
        let c = &self.cells[cell].centre;
        (0..3).map(|k| usize::from(p[k] > c[k]) << k).sum()
    }

    fn insert(&mut self, cell: usize, y: &[[f64; 3]], i: usize, depth: usize) {
        let cl = &mut self.cells[cell];
        cl.count += 1;
        for c in 0..3 {
            cl.sum[c] += y[i][c];
        }
        if cl.leaf {
            let duplicate = cl.points.iter().all(|&j| y[j] == y[i]);
            if cl.points.is_empty() || duplicate || depth >= MAX_DEPTH {
                cl.points.push(i);
                return;
            }
            cl.leaf = false;
            for j in std::mem::take(&mut cl.points) {
                self.place(cell, y, j, depth);
            }
        }
        self.place(cell, y, i, depth);
    }

    /// Inserts `i` into the child of `cell` covering it, creating the child.
    fn place(&mut self, cell: usize, y: &[[f64; 3]], i: usize, depth: usize) {
        let o = self.octant(cell, &y[i]);
        let child = match self.cells[cell].children[o] {
            NO_CHILD => {
                let parent = &self.cells[cell];
                let half = parent.half / 2.0;
                let centre =
                    [0, 1, 2].map(|k| parent.centre[k] + if o >> k & 1 == 1 { half } else { -half });
                self.cells.push(Octree::cell(centre, half));
                let id = (self.cells.len() - 1) as u32;
                self.cells[cell].children[o] = id;
                id
            }
            id => id,
        };
        self.insert(child as usize, y, i, depth + 1);
    }

    fn visit(&self, cell: usize, y: &[[f64; 3]], i: usize, f: &mut [f64; 3], z: &mut f64) {
        let cl = &self.cells[cell];
        if cl.count == 0 {
            return;
        }
        if cl.leaf {
            for &j in &cl.points {
                if j != i {
                    let q = 1.0 / (1.0 + sq_dist(&y[i], &y[j]));
                    *z += q;
                    for c in 0..3 {
                        f[c] += q * q * (y[i][c] - y[j][c]);
                    }
                }
            }
            return;
        }
        let n = cl.count as f64;
        let com = [0, 1, 2].map(|c| cl.sum[c] / n);
        let d2 = sq_dist(&y[i], &com);
        if 2.0 * cl.half < self.theta * d2.sqrt() {
            let q = 1.0 / (1.0 + d2);
            *z += n * q;
            for c in 0..3 {
                f[c] += n * q * q * (y[i][c] - com[c]);
            }
            return;
        }
        for &child in &cl.children {
            if child != NO_CHILD {
                self.visit(child as usize, y, i, f, z);
            }
        }
    }
}

impl Repulsion for Octree {
    fn repulse(&self, y: &[[f64; 3]], i: usize) -> ([f64; 3], f64) {
        let mut f = [0.0; 3];
        let mut z = 0.0;
        self.visit(0, y, i, &mut f, &mut z);
        (f, z)
    }
}

fn gradient<R: Repulsion + Sync>(
    p: &Affinities,
    y: &[[f64; 3]],
    rep: &R,
    exaggeration: f64,
    exec: Execution,
) -> (Vec<[f64; 3]>, f64) {
    let parts = exec.map_range(y.len(), |i| {
        let (frep, z) = rep.repulse(y, i);
        let mut fattr = [0.0; 3];
        for &(j, pij) in &p.rows[i] {
            let q = 1.0 / (1.0 + sq_dist(&y[i], &y[j]));
            for c in 0..3 {
                fattr[c] += pij * q * (y[i][c] - y[j][c]);
            }
        }
        (fattr, frep, z)
    });
    let z: f64 = parts.iter().map(|t| t.2).sum();
    let grad = parts
        .iter()
        .map(|(fa, fr, _)| [0, 1, 2].map(|c| 4.0 * (exaggeration * fa[c] - fr[c] / z)))
        .collect();
    (grad, z)
}

/// KL(P || Q) over the stored affinities, with `Z` from the repulsion pass.
fn kl_divergence(p: &Affinities, y: &[[f64; 3]], z: f64) -> f64 {
    let mut kl = 0.0;
    for (i, row) in p.rows.iter().enumerate() {
        for &(j, pij) in row {
            if pij > 0.0 {
                let q = (1.0 / (1.0 + sq_dist(&y[i], &y[j]))) / z;
                kl += pij * (pij / q.max(f64::MIN_POSITIVE)).ln();
            }
        }
    }
    kl
}

fn normaliser<R: Repulsion + Sync>(rep: &R, y: &[[f64; 3]], exec: Execution) -> f64 {
    exec.map_range(y.len(), |i| rep.repulse(y, i).1).iter().sum()
}

/// Embeds row-major `n x dim` points into three dimensions.
pub fn reduce_tsne(
    points: &[f64],
    dim: usize,
    params: &TsneParams,
    exec: Execution,
) -> Result<TsneOutput, LatentError> {
    let n = points.len() / dim.max(1);
    if n < 4 {
        return Err(LatentError::TooFewPoints { n, min: 4 });
    }
    if params.perplexity <= 0.0 || params.perplexity >= (n - 1) as f64 / 3.0 {
        return Err(LatentError::PerplexityTooLarge {
            perplexity: params.perplexity,
            n,
        });
    }
    let exact = n <= params.exact_max;
    let p = if exact {
        exact_affinities(points, dim, params.perplexity, exec)
    } else {
        sparse_affinities(points, dim, params.perplexity, exec)
    };

    let mut g = rng::stream(params.seed, &[0x7453]);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut y: Vec<[f64; 3]> = (0..n)
        .map(|_| [0; 3].map(|_| normal.sample(&mut g)))
        .collect();
    let mut update = vec![[0.0f64; 3]; n];
    let mut gains = vec![[1.0f64; 3]; n];
    let lr = params.learning_rate_for(n);
    let mut kl_trace = Vec::new();

    let step = |y: &[[f64; 3]], exaggeration: f64| -> Vec<[f64; 3]> {
        if exact {
            gradient(&p, y, &Exact, exaggeration, exec).0
        } else {
            gradient(&p, y, &Octree::new(y, params.theta), exaggeration, exec).0
        }
    };
    let kl = |y: &[[f64; 3]]| {
        let z = if exact {
            normaliser(&Exact, y, exec)
        } else {
            normaliser(&Octree::new(y, params.theta), y, exec)
        };
        kl_divergence(&p, y, z)
    };
    kl_trace.push((0, kl(&y)));

    for it in 0..params.iterations {
        let early = it < params.exaggeration_iters;
        let exaggeration = if early { params.exaggeration } else { 1.0 };
        let momentum = if early { params.momentum } else { params.final_momentum };
        let grad = step(&y, exaggeration);
        for i in 0..n {
            for c in 0..3 {
                let gi = grad[i][c];
                gains[i][c] = if (gi > 0.0) != (update[i][c] > 0.0) {
                    gains[i][c] + 0.2
                } else {
                    (gains[i][c] * 0.8).max(0.01)
                };
                update[i][c] = momentum * update[i][c] - lr * gains[i][c] * gi;
                y[i][c] += update[i][c];
            }
        }
        let mean = [0, 1, 2].map(|c| y.iter().map(|p| p[c]).sum::<f64>() / n as f64);
        y.iter_mut().for_each(|p| (0..3).for_each(|c| p[c] -= mean[c]));
        let done = it + 1;
        if done % KL_EVERY == 0 || done == params.iterations {
            kl_trace.push((done, kl(&y)));
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LatentError::NonFinite);
    }
    Ok(TsneOutput {
        coords: y,
        kl_trace,
        exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditional_row_hits_perplexity() {
        let sq: Vec<f64> = (1..=60).map(|i| (i as f64).powf(1.3)).collect();
        let p = conditional_row(&sq, 10.0);
        let h: f64 = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        assert!((h.exp() - 10.0).abs() < 1e-3, "{}", h.exp());
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn affinities_are_symmetric_and_normalised() {
        let mut g = rng::stream(1, &[]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<f64> = (0..40 * 5).map(|_| normal.sample(&mut g)).collect();
        for aff in [
            exact_affinities(&pts, 5, 5.0, Execution::Parallel),
            sparse_affinities(&pts, 5, 5.0, Execution::Parallel),
        ] {
            let total: f64 = aff.rows.iter().flatten().map(|e| e.1).sum();
            assert!((total - 1.0).abs() < 1e-9);
            for (i, row) in aff.rows.iter().enumerate() {
                for &(j, pij) in row {
                    let back = aff.rows[j].iter().find(|e| e.0 == i).unwrap().1;
                    assert_eq!(pij, back);
                }
            }
        }
    }

    #[test]
    fn octree_repulsion_approximates_exact() {
        let mut g = rng::stream(2, &[]);
        let normal = Normal::new(0.0, 3.0).unwrap();
        let mut y: Vec<[f64; 3]> = (0..300).map(|_| [0; 3].map(|_| normal.sample(&mut g))).collect();
        y[7] = y[3];
        let tree = Octree::new(&y, 0.5);
        let exact_z: f64 = (0..y.len()).map(|i| Exact.repulse(&y, i).1).sum();
        let bh_z: f64 = (0..y.len()).map(|i| tree.repulse(&y, i).1).sum();
        assert!(((bh_z - exact_z) / exact_z).abs() < 0.02);
        let exact_tree = Octree::new(&y, 0.0);
        for i in [0, 3, 7, 150] {
            let (fa, za) = Exact.repulse(&y, i);
            let (fb, zb) = exact_tree.repulse(&y, i);
            assert!((za - zb).abs() < 1e-9);
            for c in 0..3 {
                assert!((fa[c] - fb[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn input_validation() {
        let pts = vec![0.0; 3 * 2];
        assert!(matches!(
            reduce_tsne(&pts, 2, &TsneParams::default(), Execution::Sequential),
            Err(LatentError::TooFewPoints { n: 3, .. })
        ));
        let pts: Vec<f64> = (0..20).map(f64::from).collect();
        assert!(matches!(
            reduce_tsne(&pts, 1, &TsneParams::default(), Execution::Sequential),
            Err(LatentError::PerplexityTooLarge { .. })
        ));
    }

    #[test]
    fn kl_decreases_in_both_modes() {
        let mut g = rng::stream(5, &[]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<f64> = (0..120)
            .flat_map(|i| {
                let off = (i % 3) as f64 * 8.0;
                (0..6).map(|_| off + normal.sample(&mut g)).collect::<Vec<_>>()
            })
            .collect();
        for exact_max in [1000, 10] {
            let params = TsneParams {
                perplexity: 10.0,
                iterations: 300,
                exact_max,
                ..Default::default()
            };
            let out = reduce_tsne(&pts, 6, &params, Execution::Parallel).unwrap();
            assert_eq!(out.exact, exact_max == 1000);
            let first = out.kl_trace[0].1;
            let last = out.kl_trace.last().unwrap().1;
            assert!(last.is_finite() && last < first, "{first} -> {last}");
            let again = reduce_tsne(&pts, 6, &params, Execution::Sequential).unwrap();
            assert_eq!(out, again);
        }
    }
}
