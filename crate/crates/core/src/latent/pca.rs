use nalgebra::{DMatrix, SymmetricEigen};

use super::LatentError;
use crate::exec::Execution;

/// Upper bound on the number of retained components.
pub const PCA_DIMS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k'` unit components of length `d`, by descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the sample covariance (all `d` of them, descending).
    pub eigenvalues: Vec<f64>,
    /// Row-major `n x k'` projection.
    pub projected: Vec<f64>,
    pub dims: usize,
}

/// Projects row-major `n x d` data onto its top `min(k, d, n - 1)` principal
/// components. Each component's largest-magnitude coordinate (first on ties)
/// is made positive.
pub fn reduce_pca(data: &[f64], n: usize, d: usize, k: usize, exec: Execution) -> Result<Pca, LatentError> {
    assert_eq!(data.len(), n * d, "data is n x d");
    if n < 2 {
        return Err(LatentError::TooFewPoints { n, min: 2 });
    }
    let first = &data[..d];
    if data.chunks_exact(d).all(|row| row == first) {
        return Err(LatentError::DegenerateData);
    }
    let dims = k.min(d).min(n - 1);

    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64)
        .collect();
    let centred: Vec<f64> = data
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m))
        .collect();
    let rows = exec.map_range(d, |a| {
        (0..d)
            .map(|b| {
                (0..n)
                    .map(|i| centred[i * d + a] * centred[i * d + b])
                    .sum::<f64>()
                    / (n - 1) as f64
            })
            .collect::<Vec<f64>>()
    });
    let cov = DMatrix::from_fn(d, d, |a, b| rows[a.min(b)][a.max(b)]);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let components: Vec<Vec<f64>> = order[..dims]
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let pivot = v
                .iter()
                .enumerate()
                .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
            if v[pivot] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();

    let projected = exec
        .map_range(n, |i| {
            let row = &centred[i * d..(i + 1) * d];
            components
                .iter()
                .map(|c| c.iter().zip(row).map(|(a, b)| a * b).sum::<f64>())
                .collect::<Vec<f64>>()
        })
        .concat();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        projected,
        dims,
    })
}
