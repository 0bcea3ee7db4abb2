//! Synthetic inference bundles: Gaussian class blobs in latent space with a
//! fixed linear readout, so the whole pipeline runs without real model
//! exports.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BundleManifest, IngestError, InferenceBundle, MetaTag, Run, SCHEMA_VERSION};
use crate::model::{InferenceRecord, LogitVector, McdLogitStack};
use crate::rng;
use crate::shift::CorruptionKind;

/// Name of the uniform-random control channel every synthetic bundle carries.
pub const SYNTHETIC_RANDOM_CHANNEL: &str = "random";

const READOUT_NOISE: f64 = 0.5;
const MCD_NOISE: f64 = 0.5;
const DG_NOISE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Base records per run (corrupted variants come on top).
    pub n: usize,
    pub k: usize,
    pub d: usize,
    /// MCD samples per record.
    pub t: usize,
    /// Pairwise distance between class means.
    pub class_separation: f64,
    /// Translation of target-domain latents along the first latent axis.
    pub shift_offset: f64,
    pub seed: u64,
    pub runs: usize,
    /// Fraction of base records placed in the target domain.
    pub target_fraction: f64,
    /// Number of source records that receive corrupted variants at levels
    /// 1..=5 for every corruption kind.
    pub corrupted: usize,
    /// Emit DeepGamblers-style `k + 1` logits.
    pub dg: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 1000,
            k: 2,
            d: 16,
            t: 10,
            class_separation: 4.0,
            shift_offset: 0.0,
            seed: 0,
            runs: 1,
            target_fraction: 0.5,
            corrupted: 0,
            dg: true,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidSpec(m.to_string()));
        if self.k < 2 {
            return bad("k must be >= 2");
        }
        if self.n < self.k {
            return bad("n must be >= k");
        }
        if self.d < 1 {
            return bad("d must be >= 1");
        }
        if self.runs < 1 {
            return bad("runs must be >= 1");
        }
        if !self.class_separation.is_finite() || self.class_separation < 0.0 {
            return bad("class_separation must be finite and non-negative");
        }
        if !self.shift_offset.is_finite() {
            return bad("shift_offset must be finite");
        }
        if !(0.0..=1.0).contains(&self.target_fraction) {
            return bad("target_fraction must lie in [0, 1]");
        }
        if self.corrupted > self.source_count() {
            return bad("corrupted exceeds the number of source records");
        }
        Ok(())
    }

    fn target_count(&self) -> usize {
        (self.target_fraction * self.n as f64).round() as usize
    }

    fn source_count(&self) -> usize {
        self.n - self.target_count()
    }

    /// Class mean `c`. With `d >= k` the means sit on scaled axes so that every
    /// pair is `class_separation` apart; otherwise they are spaced along the
    /// first axis.
    fn class_mean(&self, c: usize) -> Vec<f64> {
        let mut mu = vec![0.0; self.d];
        if self.d >= self.k {
            mu[c] = self.class_separation / std::f64::consts::SQRT_2;
        } else {
            mu[0] = c as f64 * self.class_separation;
        }
        mu
    }
}

struct Readout {
    means: Vec<Vec<f64>>,
    half_norms: Vec<f64>,
    scale: f64,
}

impl Readout {
    fn new(spec: &SyntheticSpec) -> Self {
        let means: Vec<Vec<f64>> = (0..spec.k).map(|c| spec.class_mean(c)).collect();
        let half_norms = means
            .iter()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>() / 2.0)
            .collect();
        Readout {
            means,
            half_norms,
            scale: spec.class_separation.max(1.0),
        }
    }

    /// Nearest-mean discriminant, scaled so logit gaps stay moderate.
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.means
            .iter()
            .zip(&self.half_norms)
            .map(|(mu, h)| (mu.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - h) / self.scale)
            .collect()
    }
}

struct Latent {
    id: String,
    label: usize,
    x: Vec<f64>,
    meta: BTreeMap<String, String>,
}

fn normal_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Generates a bundle; identical specs give identical bundles.
pub fn generate_synthetic_bundle(spec: &SyntheticSpec) -> Result<InferenceBundle, IngestError> {
    spec.validate()?;
    let readout = Readout::new(spec);
    let n_source = spec.source_count();
    let width = spec.n.to_string().len().max(5);

    let mut latents = Vec::with_capacity(spec.n + spec.corrupted * 25);
    for i in 0..spec.n {
        let mut g = rng::stream(spec.seed, &[1, i as u64]);
        let label = i % spec.k;
        let target = i >= n_source;
        let mut x = spec.class_mean(label);
        x.iter_mut()
            .zip(normal_vec(&mut g, spec.d))
            .for_each(|(a, e)| *a += e);
        if target {
            x[0] += spec.shift_offset;
        }
        let id = format!("rec{i:0width$}");
        let site = match (target, i % 2) {
            (true, _) => "MSKCC",
            (false, 0) => "HCB",
            (false, _) => "other",
        };
        let meta = BTreeMap::from([
            ("domain".to_string(), if target { "target" } else { "source" }.to_string()),
            ("site".to_string(), site.to_string()),
            ("shift_kind".to_string(), "none".to_string()),
            ("intensity".to_string(), "0".to_string()),
            ("origin".to_string(), id.clone()),
        ]);
        latents.push(Latent { id, label, x, meta });
    }

    // Latent-space analogue of image corruptions: each kind moves the latent
    // along a fixed per-record direction, scaled by level.
    let centre: Vec<f64> = (0..spec.d)
        .map(|j| readout.means.iter().map(|m| m[j]).sum::<f64>() / spec.k as f64)
        .collect();
    for b in 0..spec.corrupted {
        for (ki, kind) in CorruptionKind::ALL.into_iter().enumerate() {
            let mut g = rng::stream(spec.seed, &[3, b as u64, ki as u64]);
            let dir = normal_vec(&mut g, spec.d);
            for level in 1..=5u8 {
                let base = &latents[b];
                let l = f64::from(level);
                let mut x = base.x.clone();
                match kind {
                    CorruptionKind::BrightnessUp => x[0] += 0.6 * l,
                    CorruptionKind::BrightnessDown => x[0] -= 0.6 * l,
                    CorruptionKind::GaussianNoise => {
                        x.iter_mut().zip(&dir).for_each(|(a, e)| *a += 0.4 * l * e)
                    }
                    CorruptionKind::Elastic => {
                        x.iter_mut().zip(&dir).for_each(|(a, e)| *a += 0.2 * l * e)
                    }
                    CorruptionKind::MotionBlur => x
                        .iter_mut()
                        .zip(&centre)
                        .for_each(|(a, c)| *a = c + (1.0 - 0.15 * l) * (*a - c)),
                }
                let mut meta = base.meta.clone();
                meta.insert("shift_kind".into(), kind.as_str().into());
                meta.insert("intensity".into(), level.to_string());
                latents.push(Latent {
                    id: format!("{}__{}_{level}", base.id, kind.as_str()),
                    label: base.label,
                    x,
                    meta,
                });
            }
        }
    }

    let total = latents.len();
    let mut runs = Vec::with_capacity(spec.runs);
    for r in 0..spec.runs {
        let mut records = Vec::with_capacity(total);
        for (j, lat) in latents.iter().enumerate() {
            let mut g = rng::stream(spec.seed, &[2, r as u64, j as u64]);
            let logits: Vec<f64> = readout
                .logits(&lat.x)
                .into_iter()
                .map(|z| z + READOUT_NOISE * g.sample::<f64, _>(StandardNormal))
                .collect();
            let mcd = (spec.t > 0).then(|| {
                let values: Vec<f32> = (0..spec.t)
                    .flat_map(|_| logits.clone())
                    .map(|z| (z + MCD_NOISE * g.sample::<f64, _>(StandardNormal)) as f32)
                    .collect();
                McdLogitStack::new(spec.t, spec.k, values).expect("finite by construction")
            });
            let dg = spec.dg.then(|| {
                let mut sorted = logits.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                let margin = sorted[0] - sorted[1];
                let abstain =
                    sorted[0] - margin + DG_NOISE * g.sample::<f64, _>(StandardNormal);
                logits
                    .iter()
                    .copied()
                    .chain(std::iter::once(abstain))
                    .map(|v| v as f32)
                    .collect::<Vec<f32>>()
            });
            let random: f32 = g.random::<f32>();
            records.push(InferenceRecord {
                id: lat.id.clone(),
                label: lat.label,
                logits: LogitVector::new(logits.iter().map(|&v| v as f32).collect())
                    .expect("finite by construction"),
                mcd,
                dg_logits: dg,
                latent: lat.x.iter().map(|&v| v as f32).collect(),
                ext_conf: BTreeMap::from([(SYNTHETIC_RANDOM_CHANNEL.to_string(), random)]),
                meta: lat.meta.clone(),
                image_ref: None,
            });
        }
        runs.push(Run::new(records, r)?);
    }

    let mut shift_kinds = vec!["none"];
    shift_kinds.extend(CorruptionKind::ALL.iter().map(|k| k.as_str()));
    let manifest = BundleManifest {
        schema_version: SCHEMA_VERSION,
        name: format!(
            "synthetic-k{}-sep{}-off{}-seed{}",
            spec.k, spec.class_separation, spec.shift_offset, spec.seed
        ),
        n: total,
        k: spec.k,
        t: spec.t,
        d: spec.d,
        channels: vec![SYNTHETIC_RANDOM_CHANNEL.to_string()],
        meta_schema: vec![
            MetaTag::closed("domain", ["source", "target"]),
            MetaTag::closed("site", ["HCB", "MSKCC", "other"]),
            MetaTag::closed("shift_kind", shift_kinds),
            MetaTag::closed("intensity", ["0", "1", "2", "3", "4", "5"]),
            MetaTag::free("origin"),
        ],
        image_dir: None,
        runs: spec.runs,
        dg: spec.dg,
    };
    InferenceBundle::new(manifest, runs)
}
