//! Risk-coverage analysis.
//!
//! Records are ranked by descending confidence (ties by ascending id); the
//! selective risk at coverage `j/n` is the error rate among the `j` top-ranked
//! records. AURC is the plain mean of the `n` prefix risks, in percent.

mod bootstrap;
mod report;

use std::cmp::Ordering;

use serde::Serialize;

use crate::csf::CsfError;

pub use bootstrap::{bootstrap_aurc, bootstrap_ci, percentile};
pub use report::{
    default_studies, detection_counts, evaluate, MetricReport, MetricRow, OutcomeRow, RunId,
    StudyData, DEFAULT_OUTCOME_COVERAGES,
};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("EmptyStudy: study `{0}` has no records")]
    EmptyStudy(String),
    #[error("LengthMismatch: {residuals} residuals vs {confidences} confidences")]
    LengthMismatch { residuals: usize, confidences: usize },
    #[error("DegenerateStudy: failure AUROC needs both correct and incorrect records")]
    DegenerateStudy,
    #[error("NonFiniteValue: confidence at position {0} is not finite")]
    NonFiniteConfidence(usize),
    #[error("UnknownStudy: `{0}`")]
    UnknownStudy(String),
    #[error(transparent)]
    Csf(#[from] CsfError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskCoverageCurve {
    /// `j / n` for `j = 1..=n`.
    pub coverage: Vec<f64>,
    /// Selective risk among the `j` most confident records.
    pub risk: Vec<f64>,
    /// Input positions in rank order (most confident first).
    pub ordering: Vec<usize>,
    /// Number of residual-1 records.
    pub errors: usize,
}

impl RiskCoverageCurve {
    pub fn len(&self) -> usize {
        self.risk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.risk.is_empty()
    }

    /// `m` evenly spaced coverage points `i/m`, each paired with the risk of
    /// the last prefix reached at that coverage.
    pub fn thinned(&self, points: usize) -> Vec<(f64, f64)> {
        let n = self.len();
        if n == 0 || points == 0 {
            return Vec::new();
        }
        (1..=points)
            .map(|i| {
                let idx = (i * n).div_ceil(points) - 1;
                (i as f64 / points as f64, self.risk[idx])
            })
            .collect()
    }
}

fn check_inputs(residuals: &[u8], confidences: &[f64]) -> Result<(), MetricsError> {
    if residuals.len() != confidences.len() {
        return Err(MetricsError::LengthMismatch {
            residuals: residuals.len(),
            confidences: confidences.len(),
        });
    }
    if let Some(i) = confidences.iter().position(|c| !c.is_finite()) {
        return Err(MetricsError::NonFiniteConfidence(i));
    }
    Ok(())
}

/// Builds the curve with ties broken by `tie(i, j)`.
pub fn rc_curve_by<F>(
    residuals: &[u8],
    confidences: &[f64],
    tie: F,
) -> Result<RiskCoverageCurve, MetricsError>
where
    F: Fn(usize, usize) -> Ordering,
{
    check_inputs(residuals, confidences)?;
    let n = residuals.len();
    if n == 0 {
        return Err(MetricsError::EmptyStudy(String::new()));
    }
    let mut ordering: Vec<usize> = (0..n).collect();
    ordering.sort_by(|&a, &b| {
        confidences[b]
            .partial_cmp(&confidences[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| tie(a, b))
    });
    let mut errors = 0usize;
    let risk: Vec<f64> = ordering
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            errors += usize::from(residuals[i] != 0);
            errors as f64 / (j + 1) as f64
        })
        .collect();
    let coverage = (1..=n).map(|j| j as f64 / n as f64).collect();
    Ok(RiskCoverageCurve {
        coverage,
        risk,
        ordering,
        errors,
    })
}

/// Risk-coverage curve with ties broken by ascending id.
pub fn rc_curve<S: AsRef<str>>(
    residuals: &[u8],
    confidences: &[f64],
    ids: &[S],
) -> Result<RiskCoverageCurve, MetricsError> {
    if ids.len() != residuals.len() {
        return Err(MetricsError::LengthMismatch {
            residuals: residuals.len(),
            confidences: ids.len(),
        });
    }
    rc_curve_by(residuals, confidences, |a, b| {
        ids[a].as_ref().cmp(ids[b].as_ref())
    })
}

/// Risk-coverage curve with ties broken by input position.
pub fn rc_curve_indexed(
    residuals: &[u8],
    confidences: &[f64],
) -> Result<RiskCoverageCurve, MetricsError> {
    rc_curve_by(residuals, confidences, |a, b| a.cmp(&b))
}

fn mean_risk_percent(risk: impl Iterator<Item = f64>, n: usize) -> f64 {
    100.0 * risk.sum::<f64>() / n as f64
}

/// Area under the risk-coverage curve in percent.
pub fn aurc(curve: &RiskCoverageCurve) -> f64 {
    mean_risk_percent(curve.risk.iter().copied(), curve.len())
}

/// AURC of the ranking that puts every correct record first.
pub fn optimal_aurc(n: usize, errors: usize) -> f64 {
    let correct = n - errors;
    mean_risk_percent(
        (1..=n).map(|j| j.saturating_sub(correct) as f64 / j as f64),
        n,
    )
}

/// Excess AURC over the optimal ranking of the same predictions.
pub fn eaurc(curve: &RiskCoverageCurve) -> f64 {
    aurc(curve) - optimal_aurc(curve.len(), curve.errors)
}

/// Probability that a random correct record outranks a random incorrect one,
/// ties counting one half.
pub fn failure_auroc(residuals: &[u8], confidences: &[f64]) -> Result<f64, MetricsError> {
    check_inputs(residuals, confidences)?;
    let mut pairs: Vec<(f64, bool)> = confidences
        .iter()
        .zip(residuals)
        .map(|(&c, &r)| (c, r != 0))
        .collect();
    let n_wrong = pairs.iter().filter(|p| p.1).count() as u128;
    let n_right = pairs.len() as u128 - n_wrong;
    if n_wrong == 0 || n_right == 0 {
        return Err(MetricsError::DegenerateStudy);
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    // Twice the number of winning pairs, so ties stay integral.
    let mut doubled_wins: u128 = 0;
    let mut wrong_below: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let (mut right, mut wrong) = (0u128, 0u128);
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            if pairs[j].1 {
                wrong += 1;
            } else {
                right += 1;
            }
            j += 1;
        }
        doubled_wins += right * (2 * wrong_below + wrong);
        wrong_below += wrong;
        i = j;
    }
    Ok(doubled_wins as f64 / (2 * n_right * n_wrong) as f64)
}

/// Fraction of residual-0 records.
pub fn accuracy(residuals: &[u8]) -> f64 {
    let wrong = residuals.iter().filter(|&&r| r != 0).count();
    1.0 - wrong as f64 / residuals.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const RES: [u8; 4] = [0, 0, 1, 1];
    const CONF: [f64; 4] = [0.9, 0.8, 0.2, 0.1];
    const REV: [f64; 4] = [0.1, 0.2, 0.8, 0.9];

    #[test]
    fn worked_example() {
        let c = rc_curve_indexed(&RES, &CONF).unwrap();
        assert_eq!(c.risk, vec![0.0, 0.0, 1.0 / 3.0, 0.5]);
        assert_eq!(c.coverage, vec![0.25, 0.5, 0.75, 1.0]);
        assert_abs_diff_eq!(aurc(&c), (1.0 / 3.0 + 0.5) / 4.0 * 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(aurc(&c), 20.8333, epsilon = 1e-4);
        assert_eq!(eaurc(&c), 0.0);

        let r = rc_curve_indexed(&RES, &REV).unwrap();
        assert_abs_diff_eq!(aurc(&r), (2.0 + 2.0 / 3.0 + 0.5) / 4.0 * 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(aurc(&r), 79.1667, epsilon = 1e-4);
        assert_abs_diff_eq!(eaurc(&r), 58.3333, epsilon = 1e-4);
    }

    #[test]
    fn trivial_curves() {
        let c = rc_curve_indexed(&[0; 5], &[0.1, 0.5, 0.2, 0.9, 0.3]).unwrap();
        assert!(c.risk.iter().all(|&r| r == 0.0));
        assert_eq!(aurc(&c), 0.0);
        assert_eq!(eaurc(&c), 0.0);
        let c = rc_curve_indexed(&[1; 5], &[0.1, 0.5, 0.2, 0.9, 0.3]).unwrap();
        assert!(c.risk.iter().all(|&r| r == 1.0));
        assert_eq!(aurc(&c), 100.0);
        assert!(matches!(
            rc_curve_indexed(&[], &[]),
            Err(MetricsError::EmptyStudy(_))
        ));
        assert!(matches!(
            rc_curve_indexed(&[0], &[f64::NAN]),
            Err(MetricsError::NonFiniteConfidence(0))
        ));
        assert!(matches!(
            rc_curve_indexed(&[0, 1], &[0.5]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn ties_break_by_id() {
        let res = [1, 0];
        let conf = [0.5, 0.5];
        let c = rc_curve(&res, &conf, &["b", "a"]).unwrap();
        assert_eq!(c.ordering, vec![1, 0]);
        assert_eq!(c.risk, vec![0.0, 0.5]);
        let c = rc_curve(&res, &conf, &["a", "b"]).unwrap();
        assert_eq!(c.risk, vec![1.0, 0.5]);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(failure_auroc(&RES, &CONF).unwrap(), 1.0);
        assert_eq!(failure_auroc(&RES, &[0.3; 4]).unwrap(), 0.5);
        // correct {0.9, 0.2}, incorrect {0.8, 0.1}
        assert_eq!(failure_auroc(&[0, 0, 1, 1], &[0.9, 0.2, 0.8, 0.1]).unwrap(), 0.75);
        assert!(matches!(
            failure_auroc(&[0, 0], &[0.1, 0.2]),
            Err(MetricsError::DegenerateStudy)
        ));
    }

    #[test]
    fn thinning() {
        let c = rc_curve_indexed(&RES, &CONF).unwrap();
        let t = c.thinned(4);
        assert_eq!(t.iter().map(|p| p.1).collect::<Vec<_>>(), c.risk);
        let t = c.thinned(2);
        assert_eq!(t, vec![(0.5, 0.0), (1.0, 0.5)]);
        let t = c.thinned(8);
        assert_eq!(t.len(), 8);
        assert_eq!(t[0], (0.125, 0.0));
        assert_eq!(t[7], (1.0, 0.5));
    }

    fn instance() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
        (1usize..120).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..2, n),
                proptest::collection::vec((0u8..12).prop_map(|v| f64::from(v) / 11.0), n),
            )
        })
    }

    proptest! {
        #[test]
        fn rank_invariance((res, conf) in instance()) {
            let c1 = rc_curve_indexed(&res, &conf).unwrap();
            let mapped: Vec<f64> = conf.iter().map(|&c| (3.0 * c).exp() - 7.0).collect();
            let c2 = rc_curve_indexed(&res, &mapped).unwrap();
            prop_assert_eq!(&c1.risk, &c2.risk);
            prop_assert_eq!(aurc(&c1), aurc(&c2));
            prop_assert_eq!(eaurc(&c1), eaurc(&c2));
            if let Ok(a) = failure_auroc(&res, &conf) {
                prop_assert_eq!(a, failure_auroc(&res, &mapped).unwrap());
            }
        }

        #[test]
        fn eaurc_non_negative((res, conf) in instance()) {
            let c = rc_curve_indexed(&res, &conf).unwrap();
            let e = eaurc(&c);
            prop_assert!(e >= 0.0);
            let a = aurc(&c);
            prop_assert!((0.0..=100.0).contains(&a));
            prop_assert!((c.risk.last().unwrap() - (1.0 - accuracy(&res))).abs() < 1e-12);
            // zero iff every correct record precedes every error
            let ranked: Vec<u8> = c.ordering.iter().map(|&i| res[i]).collect();
            let sorted = ranked.windows(2).all(|w| w[0] <= w[1]);
            prop_assert_eq!(e == 0.0, sorted);
        }

        #[test]
        fn swap_improves((res, conf) in instance(), pick in any::<(usize, usize)>()) {
            let right: Vec<usize> = (0..res.len()).filter(|&i| res[i] == 0).collect();
            let wrong: Vec<usize> = (0..res.len()).filter(|&i| res[i] == 1).collect();
            prop_assume!(!right.is_empty() && !wrong.is_empty());
            let a = right[pick.0 % right.len()];
            let b = wrong[pick.1 % wrong.len()];
            prop_assume!(conf[a] < conf[b]);
            let mut swapped = conf.clone();
            swapped.swap(a, b);
            let before = aurc(&rc_curve_indexed(&res, &conf).unwrap());
            let after = aurc(&rc_curve_indexed(&res, &swapped).unwrap());
            prop_assert!(after <= before + 1e-12);
        }
    }
}
