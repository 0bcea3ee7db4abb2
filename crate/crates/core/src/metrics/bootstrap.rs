use rand::Rng;

use super::{aurc, rc_curve_by, MetricsError};
use crate::exec::Execution;
use crate::rng;

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

/// AURC of `resamples` record-level bootstrap draws. Draw `b` uses its own
/// RNG stream, so the output does not depend on execution order.
pub fn bootstrap_aurc(
    residuals: &[u8],
    confidences: &[f64],
    resamples: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<f64>, MetricsError> {
    // Validates lengths, finiteness and emptiness once up front.
    rc_curve_by(residuals, confidences, |a, b| a.cmp(&b))?;
    let n = residuals.len();
    Ok(exec.map_range(resamples, |b| {
        let mut g = rng::stream(seed, &[b as u64]);
        let picks: Vec<usize> = (0..n).map(|_| g.random_range(0..n)).collect();
        let res: Vec<u8> = picks.iter().map(|&i| residuals[i]).collect();
        let conf: Vec<f64> = picks.iter().map(|&i| confidences[i]).collect();
        let curve = rc_curve_by(&res, &conf, |x, y| picks[x].cmp(&picks[y]))
            .expect("inputs validated");
        aurc(&curve)
    }))
}

/// 2.5 / 97.5 percentile interval of bootstrapped AURC.
pub fn bootstrap_ci(
    residuals: &[u8],
    confidences: &[f64],
    resamples: usize,
    seed: u64,
    exec: Execution,
) -> Result<(f64, f64), MetricsError> {
    if resamples == 0 {
        return Err(MetricsError::EmptyStudy("bootstrap with zero resamples".into()));
    }
    let mut values = bootstrap_aurc(residuals, confidences, resamples, seed, exec)?;
    values.sort_by(f64::total_cmp);
    Ok((percentile(&values, 0.025), percentile(&values, 0.975)))
}
