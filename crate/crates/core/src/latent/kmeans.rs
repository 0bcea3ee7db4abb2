use rand::Rng;

use crate::exec::Execution;
use crate::rng;

pub const DEFAULT_CLUSTERS: usize = 9;
pub const MAX_ITERATIONS: usize = 300;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans<const D: usize> {
    pub centers: Vec<[f64; D]>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss: Vec<f64>,
    pub iterations: usize,
    /// Largest center displacement of the final update.
    pub final_move: f64,
}

fn sq<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center, lowest index on ties.
pub fn nearest<const D: usize>(p: &[f64; D], centers: &[[f64; D]]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(c, m)| (c, sq(p, m)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus<const D: usize>(points: &[[f64; D]], k: usize, seed: u64) -> Vec<[f64; D]> {
    let mut g = rng::stream(seed, &[0x6b6d]);
    let mut centers = vec![points[g.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = g.random::<f64>() * total;
            d2.iter()
                .position(|&w| {
                    r -= w;
                    r < 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive mass"))
        } else {
            g.random_range(0..points.len())
        };
        let c = points[pick];
        d2.iter_mut()
            .zip(points)
            .for_each(|(w, p)| *w = w.min(sq(p, &c)));
        centers.push(c);
    }
    centers
}

/// k-means++ seeding followed by Lloyd iterations until the largest center
/// move falls below [`TOLERANCE`] or [`MAX_ITERATIONS`] is reached. `k` is
/// capped at the number of points; empty clusters keep their center.
pub fn kmeans<const D: usize>(points: &[[f64; D]], k: usize, seed: u64, exec: Execution) -> KMeans<D> {
    assert!(!points.is_empty(), "k-means needs at least one point");
    let k = k.clamp(1, points.len());
    let mut centers = plus_plus(points, k, seed);
    let mut labels = vec![0; points.len()];
    let mut wcss = Vec::new();
    let mut iterations = 0;
    let mut final_move = 0.0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let assigned = exec.map_slice(points, |p| nearest(p, &centers));
        labels = assigned.iter().map(|a| a.0).collect();
        wcss.push(assigned.iter().map(|a| a.1).sum());

        let mut sums = vec![[0.0; D]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for j in 0..D {
                sums[l][j] += p[j];
            }
        }
        final_move = 0.0f64;
        for c in 0..k {
            if counts[c] > 0 {
                let m = sums[c].map(|s| s / counts[c] as f64);
                final_move = final_move.max(sq(&m, &centers[c]).sqrt());
                centers[c] = m;
            }
        }
        if final_move < TOLERANCE {
            break;
        }
    }
    KMeans {
        centers,
        labels,
        wcss,
        iterations,
        final_move,
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
