//! Vantage-point tree for exact k-nearest-neighbour queries.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::exec::Execution;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

struct Node {
    point: usize,
    radius: f64,
    inside: Option<usize>,
    outside: Option<usize>,
}

pub struct VpTree<'a> {
    data: &'a [f64],
    dim: usize,
    nodes: Vec<Node>,
    root: Option<usize>,
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl<'a> VpTree<'a> {
    /// Builds over row-major `data` with `dim` columns. The vantage point of
    /// each subtree is its first item, so the tree is deterministic.
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        let n = data.len() / dim;
        let mut tree = VpTree {
            data,
            dim,
            nodes: Vec::with_capacity(n),
            root: None,
        };
        let mut items: Vec<usize> = (0..n).collect();
        tree.root = tree.build(&mut items);
        tree
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn build(&mut self, items: &mut [usize]) -> Option<usize> {
        let (vp, rest) = items.split_first_mut()?;
        let vp = *vp;
        let mut radius = 0.0;
        let mut split = 0;
        if !rest.is_empty() {
            let mid = rest.len() / 2;
            let key = |i: &usize| dist(self.row(vp), self.row(*i));
            rest.select_nth_unstable_by(mid, |a, b| key(a).total_cmp(&key(b)).then(a.cmp(b)));
            radius = key(&rest[mid]);
            split = mid;
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            point: vp,
            radius,
            inside: None,
            outside: None,
        });
        let (inner, outer) = rest.split_at_mut(split);
        let inside = self.build(inner);
        let outside = self.build(outer);
        self.nodes[id].inside = inside;
        self.nodes[id].outside = outside;
        Some(id)
    }

    /// The `k` nearest neighbours of item `query` (itself excluded), by
    /// ascending distance, ties by index.
    pub fn nearest(&self, query: usize, k: usize) -> Vec<(usize, f64)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        let mut tau = f64::INFINITY;
        if k > 0 {
            self.search(self.root, query, k, &mut heap, &mut tau);
        }
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.1, c.0)).collect()
    }

    fn search(
        &self,
        node: Option<usize>,
        query: usize,
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
        tau: &mut f64,
    ) {
        let Some(id) = node else { return };
        let n = &self.nodes[id];
        let d = dist(self.row(n.point), self.row(query));
        if n.point != query && d <= *tau {
            heap.push(Candidate(d, n.point));
            if heap.len() > k {
                heap.pop();
            }
            if heap.len() == k {
                *tau = heap.peek().map_or(f64::INFINITY, |c| c.0);
            }
        }
        if n.inside.is_none() && n.outside.is_none() {
            return;
        }
        if d < n.radius {
            if d - *tau <= n.radius {
                self.search(n.inside, query, k, heap, tau);
            }
            if d + *tau >= n.radius {
                self.search(n.outside, query, k, heap, tau);
            }
        } else {
            if d + *tau >= n.radius {
                self.search(n.outside, query, k, heap, tau);
            }
            if d - *tau <= n.radius {
                self.search(n.inside, query, k, heap, tau);
            }
        }
    }
}

/// `k` nearest neighbours of every row.
pub fn knn(data: &[f64], dim: usize, k: usize, exec: Execution) -> Vec<Vec<(usize, f64)>> {
    let tree = VpTree::new(data, dim);
    exec.map_range(data.len() / dim, |i| tree.nearest(i, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(data: &[f64], dim: usize, q: usize, k: usize) -> Vec<f64> {
        let n = data.len() / dim;
        let mut d: Vec<f64> = (0..n)
            .filter(|&i| i != q)
            .map(|i| dist(&data[q * dim..(q + 1) * dim], &data[i * dim..(i + 1) * dim]))
            .collect();
        d.sort_by(f64::total_cmp);
        d.truncate(k);
        d
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn matches_brute_force(dim in 1usize..5, raw in proptest::collection::vec(0u8..6, 4..240), k in 1usize..12) {
            let n = raw.len() / dim;
            prop_assume!(n >= 2);
            let data: Vec<f64> = raw[..n * dim].iter().map(|&v| f64::from(v)).collect();
            let k = k.min(n - 1);
            let got = knn(&data, dim, k, Execution::Parallel);
            for q in 0..n {
                let d: Vec<f64> = got[q].iter().map(|p| p.1).collect();
                prop_assert_eq!(d, brute(&data, dim, q, k));
                prop_assert!(got[q].iter().all(|p| p.0 != q));
            }
        }
    }
}
