//! Domain types shared by every analytics module.

mod predicate;
mod study;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use predicate::{Predicate, PredicateParseError, PSEUDO_TAGS};
pub use study::{StudyDefinition, StudyKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("NonFiniteValue: {what} contains a non-finite value at position {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("ShapeMismatch: {what} has {actual} values, expected {expected}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("at least two classes are required, got {0}")]
    TooFewClasses(usize),
}

fn check_finite(what: &'static str, values: &[f32]) -> Result<(), ModelError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(ModelError::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// Pre-softmax classifier scores for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f32>);

impl LogitVector {
    pub fn new(values: Vec<f32>) -> Result<Self, ModelError> {
        if values.len() < 2 {
            return Err(ModelError::TooFewClasses(values.len()));
        }
        check_finite("logits", &values)?;
        Ok(LogitVector(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `T` Monte-Carlo-Dropout logit samples of width `K`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct McdLogitStack {
    samples: usize,
    classes: usize,
    values: Vec<f32>,
}

impl McdLogitStack {
    pub fn new(samples: usize, classes: usize, values: Vec<f32>) -> Result<Self, ModelError> {
        if classes < 2 {
            return Err(ModelError::TooFewClasses(classes));
        }
        if samples == 0 || values.len() != samples * classes {
            return Err(ModelError::Shape {
                what: "mcd stack",
                expected: samples.max(1) * classes,
                actual: values.len(),
            });
        }
        check_finite("mcd stack", &values)?;
        Ok(McdLogitStack {
            samples,
            classes,
            values,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.samples
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn sample(&self, t: usize) -> &[f32] {
        &self.values[t * self.classes..(t + 1) * self.classes]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.classes)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.values
    }
}

/// One evaluated test case.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRecord {
    pub id: String,
    pub label: usize,
    pub logits: LogitVector,
    pub mcd: Option<McdLogitStack>,
    /// `K + 1` logits of a DeepGamblers-style head; the last entry abstains.
    pub dg_logits: Option<Vec<f32>>,
    pub latent: Vec<f32>,
    pub ext_conf: BTreeMap<String, f32>,
    pub meta: BTreeMap<String, String>,
    pub image_ref: Option<String>,
}

/// Classifier decision: deterministic-logit argmax, lowest index on ties.
pub fn predict(record: &InferenceRecord) -> usize {
    record.logits.argmax()
}

/// 1 if the classifier decision is wrong, else 0.
pub fn residual(record: &InferenceRecord) -> u8 {
    u8::from(predict(record) != record.label)
}

/// Outcome of the failure-detection task at threshold `tau`. Positive means
/// "flagged as failure", i.e. confidence below `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectionOutcome {
    TP,
    FP,
    TN,
    FN,
}

impl DetectionOutcome {
    pub fn classify(wrong: bool, confidence: f64, tau: f64) -> Self {
        let flagged = confidence < tau;
        match (wrong, flagged) {
            (true, true) => DetectionOutcome::TP,
            (false, true) => DetectionOutcome::FP,
            (false, false) => DetectionOutcome::TN,
            (true, false) => DetectionOutcome::FN,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DetectionOutcome::TP => "TP",
            DetectionOutcome::FP => "FP",
            DetectionOutcome::TN => "TN",
            DetectionOutcome::FN => "FN",
        }
    }
}

impl fmt::Display for DetectionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn detection_outcome(record: &InferenceRecord, confidence: f64, tau: f64) -> DetectionOutcome {
    DetectionOutcome::classify(residual(record) == 1, confidence, tau)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl OutcomeCounts {
    pub fn tally(residuals: &[u8], confidences: &[f64], tau: f64) -> Self {
        let mut c = OutcomeCounts::default();
        for (&r, &s) in residuals.iter().zip(confidences) {
            match DetectionOutcome::classify(r == 1, s, tau) {
                DetectionOutcome::TP => c.tp += 1,
                DetectionOutcome::FP => c.fp += 1,
                DetectionOutcome::TN => c.tn += 1,
                DetectionOutcome::FN => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Default threshold for confusion coloring: the confidence of the last record
/// retained at `coverage` when records are ranked by descending confidence.
pub fn threshold_at_coverage(confidences: &[f64], coverage: f64) -> Option<f64> {
    if confidences.is_empty() || !(coverage > 0.0 && coverage <= 1.0) {
        return None;
    }
    let mut sorted = confidences.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let keep = ((coverage * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[keep - 1])
}

pub const DEFAULT_TAU_COVERAGE: f64 = 0.95;

pub fn default_tau(confidences: &[f64]) -> Option<f64> {
    threshold_at_coverage(confidences, DEFAULT_TAU_COVERAGE)
}

#[cfg(test)]
pub(crate) fn test_record(id: &str, label: usize, logits: &[f32]) -> InferenceRecord {
    InferenceRecord {
        id: id.to_string(),
        label,
        logits: LogitVector::new(logits.to_vec()).unwrap(),
        mcd: None,
        dg_logits: None,
        latent: vec![0.0],
        ext_conf: BTreeMap::new(),
        meta: BTreeMap::new(),
        image_ref: None,
    }
}
