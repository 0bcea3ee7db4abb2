//! Confidence scoring functions. Every channel is oriented so that a higher
//! score means more confidence; entropies are negated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::ingest::Run;
use crate::model::McdLogitStack;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CsfError {
    #[error("UnknownChannel: `{0}`")]
    UnknownChannel(String),
    #[error("WidthMismatch: auxiliary logits have width {actual}, expected {expected}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("MissingTensor: channel `{channel}` needs {tensor}, absent from record {record}")]
    MissingTensor {
        channel: String,
        tensor: &'static str,
        record: usize,
    },
    #[error("NonFiniteValue: channel `{channel}` at record {record}")]
    NonFinite { channel: String, record: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ChannelName {
    Msr,
    Pe,
    McdMsr,
    McdPe,
    McdEe,
    DgRes,
    External(String),
}

impl ChannelName {
    pub const BUILTIN: [ChannelName; 6] = [
        ChannelName::Msr,
        ChannelName::Pe,
        ChannelName::McdMsr,
        ChannelName::McdPe,
        ChannelName::McdEe,
        ChannelName::DgRes,
    ];
}

impl fmt::Display for ChannelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelName::Msr => f.write_str("msr"),
            ChannelName::Pe => f.write_str("pe"),
            ChannelName::McdMsr => f.write_str("mcd-msr"),
            ChannelName::McdPe => f.write_str("mcd-pe"),
            ChannelName::McdEe => f.write_str("mcd-ee"),
            ChannelName::DgRes => f.write_str("dg-res"),
            ChannelName::External(n) => write!(f, "ext:{n}"),
        }
    }
}

impl FromStr for ChannelName {
    type Err = CsfError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "msr" => ChannelName::Msr,
            "pe" => ChannelName::Pe,
            "mcd-msr" => ChannelName::McdMsr,
            "mcd-pe" => ChannelName::McdPe,
            "mcd-ee" => ChannelName::McdEe,
            "dg-res" => ChannelName::DgRes,
            other => match other.strip_prefix("ext:") {
                Some(name) if !name.is_empty() => ChannelName::External(name.to_string()),
                _ => return Err(CsfError::UnknownChannel(s.to_string())),
            },
        })
    }
}

impl From<ChannelName> for String {
    fn from(c: ChannelName) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for ChannelName {
    type Error = CsfError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Per-record confidence scores of one CSF over one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceChannel {
    pub name: ChannelName,
    pub scores: Vec<f64>,
}

/// Numerically stable softmax in f64.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(f64::from(z)));
    let exps: Vec<f64> = logits.iter().map(|&z| (f64::from(z) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

fn max_prob(p: &[f64]) -> f64 {
    p.iter().copied().fold(0.0, f64::max)
}

/// Maximum softmax response.
pub fn msr(logits: &[f32]) -> f64 {
    max_prob(&softmax(logits))
}

/// Negated predictive entropy of the softmax output.
pub fn pe(logits: &[f32]) -> f64 {
    -entropy(&softmax(logits))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McdScores {
    pub mcd_msr: f64,
    pub mcd_pe: f64,
    pub mcd_ee: f64,
}

/// MSR and negated entropy of the mean MCD softmax, and negated mean
/// per-sample entropy.
pub fn mcd_channels(stack: &McdLogitStack) -> McdScores {
    let probs: Vec<Vec<f64>> = stack.samples().map(softmax).collect();
    let t = probs.len() as f64;
    let mean_entropy = probs.iter().map(|p| entropy(p)).sum::<f64>() / t;
    // Identical samples: use the sample itself so the Jensen gap is exactly 0
    // instead of whatever rounding the average introduces.
    let identical = probs.windows(2).all(|w| w[0] == w[1]);
    let (mean, mcd_ee) = if identical {
        (probs[0].clone(), -entropy(&probs[0]))
    } else {
        let k = stack.num_classes();
        let mean = (0..k)
            .map(|c| probs.iter().map(|p| p[c]).sum::<f64>() / t)
            .collect();
        (mean, -mean_entropy)
    };
    McdScores {
        mcd_msr: max_prob(&mean),
        mcd_pe: -entropy(&mean),
        mcd_ee,
    }
}

/// DeepGamblers confidence `1 - r`, where `r` is the softmax mass of the
/// trailing abstention logit.
pub fn dg_res(aux_logits: &[f32], num_classes: usize) -> Result<f64, CsfError> {
    if aux_logits.len() != num_classes + 1 {
        return Err(CsfError::WidthMismatch {
            expected: num_classes + 1,
            actual: aux_logits.len(),
        });
    }
    let max = aux_logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &z| m.max(f64::from(z)));
    let exps: Vec<f64> = aux_logits.iter().map(|&z| (f64::from(z) - max).exp()).collect();
    let class_mass: f64 = exps[..num_classes].iter().sum();
    Ok(class_mass / (class_mass + exps[num_classes]))
}

/// Channels computable for a run given the bundle's tensors.
pub fn available_channels(run: &Run) -> Vec<ChannelName> {
    let Some(first) = run.records().first() else {
        return Vec::new();
    };
    let mut out = vec![ChannelName::Msr, ChannelName::Pe];
    if first.mcd.is_some() {
        out.extend([ChannelName::McdMsr, ChannelName::McdPe, ChannelName::McdEe]);
    }
    if first.dg_logits.is_some() {
        out.push(ChannelName::DgRes);
    }
    out.extend(
        first
            .ext_conf
            .keys()
            .map(|k| ChannelName::External(k.clone())),
    );
    out
}

/// Scores every record of `run` with channel `name`.
pub fn compute_channel(
    run: &Run,
    name: &ChannelName,
    exec: Execution,
) -> Result<ConfidenceChannel, CsfError> {
    let records = run.records();
    let missing = |tensor, record| CsfError::MissingTensor {
        channel: name.to_string(),
        tensor,
        record,
    };
    let scores: Vec<Result<f64, CsfError>> = exec.map_range(records.len(), |i| {
        let r = &records[i];
        match name {
            ChannelName::Msr => Ok(msr(r.logits.values())),
            ChannelName::Pe => Ok(pe(r.logits.values())),
            ChannelName::McdMsr | ChannelName::McdPe | ChannelName::McdEe => {
                let stack = r.mcd.as_ref().ok_or_else(|| missing("mcd_logits", i))?;
                let s = mcd_channels(stack);
                Ok(match name {
                    ChannelName::McdMsr => s.mcd_msr,
                    ChannelName::McdPe => s.mcd_pe,
                    _ => s.mcd_ee,
                })
            }
            ChannelName::DgRes => {
                let aux = r.dg_logits.as_ref().ok_or_else(|| missing("dg_logits", i))?;
                dg_res(aux, r.logits.num_classes())
            }
            ChannelName::External(ext) => {
                let v = *r
                    .ext_conf
                    .get(ext)
                    .ok_or_else(|| CsfError::UnknownChannel(name.to_string()))?;
                if v.is_finite() {
                    Ok(f64::from(v))
                } else {
                    Err(CsfError::NonFinite {
                        channel: name.to_string(),
                        record: i,
                    })
                }
            }
        }
    });
    let scores = scores.into_iter().collect::<Result<Vec<f64>, _>>()?;
    Ok(ConfidenceChannel {
        name: name.clone(),
        scores,
    })
}

/// Pass-through of an ingested confidence channel.
pub fn external_channel(run: &Run, name: &str) -> Result<ConfidenceChannel, CsfError> {
    compute_channel(run, &ChannelName::External(name.to_string()), Execution::Sequential)
}
