//! Embedding frames: fit, color, persist.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{reduce_pca, reduce_tsne, scope_members, shift_label, LatentError, TsneParams, PCA_DIMS};
use crate::exec::Execution;
use crate::ingest::{InferenceBundle, Run};
use crate::model::{detection_outcome, predict, Predicate};

pub const FRAME_SCHEMA_VERSION: u32 = 1;

/// Frame cache directory inside a bundle.
pub const EMBEDDINGS_DIR: &str = "embeddings";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingParams {
    pub scope: Predicate,
    #[serde(default)]
    pub run: usize,
    pub pca_dims: usize,
    pub tsne: TsneParams,
}

impl Default for EmbeddingParams {
    fn default() -> Self {
        EmbeddingParams {
            scope: Predicate::All,
            run: 0,
            pca_dims: PCA_DIMS,
            tsne: TsneParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorScheme {
    #[serde(rename = "class")]
    Class,
    #[serde(rename = "shift")]
    Shift,
    #[serde(rename = "confusion")]
    Confusion,
    #[serde(rename = "csf-confusion")]
    CsfConfusion,
}

impl ColorScheme {
    pub const ALL: [ColorScheme; 4] = [
        ColorScheme::Class,
        ColorScheme::Shift,
        ColorScheme::Confusion,
        ColorScheme::CsfConfusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ColorScheme::Class => "class",
            ColorScheme::Shift => "shift",
            ColorScheme::Confusion => "confusion",
            ColorScheme::CsfConfusion => "csf-confusion",
        }
    }
}

impl fmt::Display for ColorScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ColorScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ColorScheme::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown color scheme `{s}`"))
    }
}

/// One embedded scope. The threshold-dependent `csf-confusion` scheme is
/// not stored; see [`csf_confusion_colors`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingFrame {
    pub schema_version: u32,
    pub bundle: String,
    pub params: EmbeddingParams,
    pub pca_dims_used: usize,
    pub exact_gradients: bool,
    pub kl_trace: Vec<(usize, f64)>,
    pub ids: Vec<String>,
    #[serde(skip)]
    pub coords: Vec<[f32; 3]>,
    pub colors: BTreeMap<String, Vec<String>>,
}

fn cache_key(bundle: &str, params: &EmbeddingParams) -> String {
    let mut h = Sha256::new();
    h.update(bundle.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(params).expect("params serialize"));
    hex::encode(&h.finalize()[..8])
}

impl EmbeddingFrame {
    /// Cache key of the (bundle, parameters) pair the frame was fit on.
    pub fn key(&self) -> String {
        cache_key(&self.bundle, &self.params)
    }

    pub fn key_for(bundle: &InferenceBundle, params: &EmbeddingParams) -> String {
        cache_key(&bundle.manifest.name, params)
    }

    pub fn paths(dir: &Path, key: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{key}.json")), dir.join(format!("{key}.coords.f32")))
    }

    /// Writes `<key>.json` and `<key>.coords.f32` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<String, LatentError> {
        fs::create_dir_all(dir)?;
        let key = self.key();
        let (json, coords) = EmbeddingFrame::paths(dir, &key);
        let bytes: Vec<u8> = self
            .coords
            .iter()
            .flatten()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(&coords, bytes)?;
        let text = serde_json::to_string_pretty(self).expect("frame serializes");
        fs::write(&json, format!("{text}\n"))?;
        Ok(key)
    }

    pub fn load(dir: &Path, key: &str) -> Result<EmbeddingFrame, LatentError> {
        let (json, coords) = EmbeddingFrame::paths(dir, key);
        let text = fs::read_to_string(&json)?;
        let mut frame: EmbeddingFrame =
            serde_json::from_str(&text).map_err(|e| LatentError::InvalidFrame(e.to_string()))?;
        let bytes = fs::read(&coords)?;
        if bytes.len() != frame.ids.len() * 12 {
            return Err(LatentError::InvalidFrame(format!(
                "{}: {} bytes for {} records",
                coords.display(),
                bytes.len(),
                frame.ids.len()
            )));
        }
        frame.coords = bytes
            .chunks_exact(12)
            .map(|c| [0, 1, 2].map(|k| f32::from_le_bytes([c[4 * k], c[4 * k + 1], c[4 * k + 2], c[4 * k + 3]])))
            .collect();
        if frame.coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(LatentError::InvalidFrame("non-finite coordinate".into()));
        }
        Ok(frame)
    }

    /// The frame with coordinates inlined, as served over HTTP.
    pub fn to_json_with_coords(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("frame serializes");
        v["coords"] = serde_json::to_value(&self.coords).expect("coords serialize");
        v
    }
}

/// PCA then t-SNE over the latents of the records in `params.scope`.
pub fn embed(
    bundle: &InferenceBundle,
    params: &EmbeddingParams,
    exec: Execution,
) -> Result<EmbeddingFrame, LatentError> {
    let run = bundle
        .run(params.run)
        .ok_or_else(|| LatentError::UnknownRecord(format!("run {}", params.run)))?;
    let members = scope_members(run, &params.scope);
    if members.is_empty() {
        return Err(LatentError::EmptyScope(params.scope.to_string()));
    }
    let d = bundle.manifest.d;
    let latents: Vec<f64> = members
        .iter()
        .flat_map(|&i| run.records()[i].latent.iter().map(|&v| f64::from(v)))
        .collect();
    let pca = reduce_pca(&latents, members.len(), d, params.pca_dims, exec)?;
    let tsne = reduce_tsne(&pca.projected, pca.dims, &params.tsne, exec)?;

    let records: Vec<_> = members.iter().map(|&i| &run.records()[i]).collect();
    let colors = BTreeMap::from([
        (
            ColorScheme::Class.to_string(),
            records.iter().map(|r| r.label.to_string()).collect(),
        ),
        (
            ColorScheme::Shift.to_string(),
            records.iter().map(|r| shift_label(r)).collect(),
        ),
        (
            ColorScheme::Confusion.to_string(),
            records
                .iter()
                .map(|r| format!("{}->{}", r.label, predict(r)))
                .collect(),
        ),
    ]);
    Ok(EmbeddingFrame {
        schema_version: FRAME_SCHEMA_VERSION,
        bundle: bundle.manifest.name.clone(),
        params: params.clone(),
        pca_dims_used: pca.dims,
        exact_gradients: tsne.exact,
        kl_trace: tsne.kl_trace,
        ids: records.iter().map(|r| r.id.clone()).collect(),
        coords: tsne
            .coords
            .iter()
            .map(|c| c.map(|v| v as f32))
            .collect(),
        colors,
    })
}

/// Detection outcome (TP/FP/TN/FN) of every frame record at threshold `tau`.
/// `scores` covers every record of `run`.
pub fn csf_confusion_colors(
    frame: &EmbeddingFrame,
    run: &Run,
    scores: &[f64],
    tau: f64,
) -> Result<Vec<String>, LatentError> {
    frame
        .ids
        .iter()
        .map(|id| {
            let i = run
                .position(id)
                .ok_or_else(|| LatentError::UnknownRecord(id.clone()))?;
            Ok(detection_outcome(&run.records()[i], scores[i], tau).to_string())
        })
        .collect()
}
