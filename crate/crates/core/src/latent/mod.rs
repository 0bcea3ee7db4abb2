//! Latent-space analytics: PCA + t-SNE embedding, concept clustering,
//! silent-failure mining, intensity sweeps and failure locality.

mod frame;
mod kmeans;
mod knn;
mod pca;
mod tsne;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ingest::Run;
use crate::model::{predict, residual, InferenceRecord, Predicate};
use crate::shift::CorruptionKind;

pub use frame::{
    csf_confusion_colors, embed, ColorScheme, EmbeddingFrame, EmbeddingParams, EMBEDDINGS_DIR, FRAME_SCHEMA_VERSION,
};
pub use kmeans::{adjusted_rand_index, kmeans, nearest, KMeans, DEFAULT_CLUSTERS, MAX_ITERATIONS, TOLERANCE};
pub use knn::{knn, VpTree};
pub use pca::{reduce_pca, Pca, PCA_DIMS};
pub use tsne::{reduce_tsne, TsneOutput, TsneParams};

use crate::exec::Execution;

#[derive(Debug, thiserror::Error)]
pub enum LatentError {
    #[error("DegenerateData: all points identical")]
    DegenerateData,
    #[error("TooFewPoints: {n} (need at least {min})")]
    TooFewPoints { n: usize, min: usize },
    #[error("PerplexityTooLarge: perplexity {perplexity} needs n > 3 * perplexity + 1 (n = {n})")]
    PerplexityTooLarge { perplexity: f64, n: usize },
    #[error("NonFinite: embedding diverged")]
    NonFinite,
    #[error("MissingVariant: level {0}")]
    MissingVariant(u8),
    #[error("UnknownRecord: `{0}`")]
    UnknownRecord(String),
    #[error("EmptyScope: no record matches `{0}`")]
    EmptyScope(String),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("InvalidFrame: {0}")]
    InvalidFrame(String),
}

/// Nine (or fewer) k-means clusters of one concept's embedded members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptCluster {
    pub concept: String,
    pub predicate: Predicate,
    pub centers: Vec<[f64; 3]>,
    pub representative_ids: Vec<String>,
    pub sizes: Vec<usize>,
}

/// Clusters the members of `predicate` within a frame and picks, per
/// cluster, the member closest to its center (ties by id).
pub fn concept_clusters(
    frame: &EmbeddingFrame,
    run: &Run,
    concept: &str,
    predicate: &Predicate,
    seed: u64,
    exec: Execution,
) -> Result<ConceptCluster, LatentError> {
    let members: Vec<usize> = frame
        .ids
        .iter()
        .enumerate()
        .filter(|(_, id)| run.get(id).is_some_and(|r| predicate.matches(r)))
        .map(|(i, _)| i)
        .collect();
    if members.is_empty() {
        return Err(LatentError::EmptyScope(predicate.to_string()));
    }
    let points: Vec<[f64; 3]> = members.iter().map(|&i| frame.coords[i].map(f64::from)).collect();
    let km = kmeans(&points, DEFAULT_CLUSTERS, seed, exec);
    let k = km.centers.len();
    let mut best: Vec<Option<(f64, &str)>> = vec![None; k];
    let mut sizes = vec![0; k];
    for (j, &l) in km.labels.iter().enumerate() {
        sizes[l] += 1;
        let d: f64 = (0..3).map(|c| (points[j][c] - km.centers[l][c]).powi(2)).sum();
        let id = frame.ids[members[j]].as_str();
        let better = match best[l] {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && id < bid),
        };
        if better {
            best[l] = Some((d, id));
        }
    }
    let keep: Vec<usize> = (0..k).filter(|&c| best[c].is_some()).collect();
    Ok(ConceptCluster {
        concept: concept.to_string(),
        predicate: predicate.clone(),
        centers: keep.iter().map(|&c| km.centers[c]).collect(),
        representative_ids: keep
            .iter()
            .map(|&c| best[c].expect("kept").1.to_string())
            .collect(),
        sizes: keep.iter().map(|&c| sizes[c]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureEntry {
    pub id: String,
    pub confidence: f64,
    pub prediction: usize,
    pub label: usize,
    pub image_ref: Option<String>,
}

/// Misclassified records of `scope`, most confident first (ties by id),
/// truncated to `top`.
pub fn mine_silent_failures(run: &Run, scope: &[usize], scores: &[f64], top: usize) -> Vec<FailureEntry> {
    let records = run.records();
    let mut failures: Vec<usize> = scope
        .iter()
        .copied()
        .filter(|&i| residual(&records[i]) == 1)
        .collect();
    failures.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| records[a].id.cmp(&records[b].id))
    });
    failures
        .into_iter()
        .take(top)
        .map(|i| FailureEntry {
            id: records[i].id.clone(),
            confidence: scores[i],
            prediction: predict(&records[i]),
            label: records[i].label,
            image_ref: records[i].image_ref.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub level: u8,
    pub id: String,
    pub prediction: usize,
    pub label: usize,
    pub confidence: f64,
}

fn origin_of(record: &InferenceRecord) -> &str {
    record
        .meta
        .get("origin")
        .filter(|o| !o.is_empty())
        .map_or(record.id.as_str(), String::as_str)
}

/// Prediction and confidence of one record across the levels of one
/// corruption kind. Level 0 is the uncorrupted original when present.
pub fn intensity_sweep(
    run: &Run,
    id: &str,
    kind: CorruptionKind,
    scores: &[f64],
) -> Result<Vec<SweepPoint>, LatentError> {
    let start = run
        .get(id)
        .ok_or_else(|| LatentError::UnknownRecord(id.to_string()))?;
    let origin = origin_of(start).to_string();
    let point = |i: usize, level: u8| {
        let r = &run.records()[i];
        SweepPoint {
            level,
            id: r.id.clone(),
            prediction: predict(r),
            label: r.label,
            confidence: scores[i],
        }
    };
    let mut out = Vec::with_capacity(6);
    if let Some(i) = run.position(&origin) {
        out.push(point(i, 0));
    }
    for level in 1..=5u8 {
        let by_name = run.position(&crate::shift::variant_id(&origin, kind, level));
        let found = by_name.or_else(|| {
            run.records().iter().position(|r| {
                origin_of(r) == origin
                    && r.meta.get("shift_kind").map(String::as_str) == Some(kind.as_str())
                    && r.meta.get("intensity").map(String::as_str) == Some(&level.to_string())
            })
        });
        match found {
            Some(i) => out.push(point(i, level)),
            None => return Err(LatentError::MissingVariant(level)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureLocality {
    Border,
    OpposingCenter,
    Outlier,
}

/// Per-class k-means centers in the embedding with the distance scales used
/// to classify where a failure lies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassGeometry {
    /// `(class, center)` pairs.
    pub centers: Vec<(usize, [f64; 3])>,
    /// 95th percentile of member-to-own-center distances, pooled over classes.
    pub outlier_radius: f64,
    /// Median member-to-own-center distance per class (index = class).
    pub median: Vec<f64>,
}

impl ClassGeometry {
    /// Fits `per_class` centers to the points of each class.
    pub fn fit(
        coords: &[[f64; 3]],
        labels: &[usize],
        classes: usize,
        per_class: usize,
        seed: u64,
        exec: Execution,
    ) -> Self {
        let mut centers = Vec::new();
        let mut pooled = Vec::new();
        let mut median = vec![0.0; classes];
        for c in 0..classes {
            let pts: Vec<[f64; 3]> = coords
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| *p)
                .collect();
            if pts.is_empty() {
                continue;
            }
            let km = kmeans(&pts, per_class, seed.wrapping_add(c as u64), exec);
            let mut d: Vec<f64> = pts
                .iter()
                .zip(&km.labels)
                .map(|(p, &l)| dist(p, &km.centers[l]))
                .collect();
            pooled.extend_from_slice(&d);
            d.sort_by(f64::total_cmp);
            median[c] = crate::metrics::percentile(&d, 0.5);
            centers.extend(km.centers.into_iter().map(|m| (c, m)));
        }
        pooled.sort_by(f64::total_cmp);
        let outlier_radius = if pooled.is_empty() {
            0.0
        } else {
            crate::metrics::percentile(&pooled, 0.95)
        };
        ClassGeometry {
            centers,
            outlier_radius,
            median,
        }
    }

    /// Outlier when every center is beyond the outlier radius; opposing
    /// center when the unique nearest center belongs to the predicted class
    /// and lies within that class's median distance; border otherwise.
    pub fn classify(&self, point: &[f64; 3], predicted: usize) -> FailureLocality {
        let d: Vec<(usize, f64)> = self.centers.iter().map(|(c, m)| (*c, dist(point, m))).collect();
        if d.iter().all(|&(_, x)| x > self.outlier_radius) {
            return FailureLocality::Outlier;
        }
        let min = d.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        let tol = 1e-12 * min.max(1.0);
        let mut nearest_classes: Vec<usize> =
            d.iter().filter(|x| x.1 - min <= tol).map(|x| x.0).collect();
        nearest_classes.sort_unstable();
        nearest_classes.dedup();
        if nearest_classes == [predicted] && min < self.median.get(predicted).copied().unwrap_or(0.0) {
            FailureLocality::OpposingCenter
        } else {
            FailureLocality::Border
        }
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocatedFailure {
    pub id: String,
    pub label: usize,
    pub prediction: usize,
    pub locality: FailureLocality,
}

/// Classifies every misclassified record of a frame.
pub fn failure_locality(
    frame: &EmbeddingFrame,
    run: &Run,
    classes: usize,
    per_class: usize,
    seed: u64,
    exec: Execution,
) -> Result<(ClassGeometry, Vec<LocatedFailure>), LatentError> {
    let mut coords = Vec::with_capacity(frame.ids.len());
    let mut labels = Vec::with_capacity(frame.ids.len());
    let mut records = Vec::with_capacity(frame.ids.len());
    for (id, c) in frame.ids.iter().zip(&frame.coords) {
        let r = run.get(id).ok_or_else(|| LatentError::UnknownRecord(id.clone()))?;
        coords.push(c.map(f64::from));
        labels.push(r.label);
        records.push(r);
    }
    let geometry = ClassGeometry::fit(&coords, &labels, classes, per_class, seed, exec);
    let located = records
        .iter()
        .zip(&coords)
        .filter(|(r, _)| residual(r) == 1)
        .map(|(r, p)| LocatedFailure {
            id: r.id.clone(),
            label: r.label,
            prediction: predict(r),
            locality: geometry.classify(p, predict(r)),
        })
        .collect();
    Ok((geometry, located))
}

/// Record indices of `run` matching `scope`.
pub fn scope_members(run: &Run, scope: &Predicate) -> Vec<usize> {
    (0..run.len()).filter(|&i| scope.matches(&run.records()[i])).collect()
}

/// Metadata-derived per-record color labels shared by frames and the UI.
pub fn shift_label(record: &InferenceRecord) -> String {
    let meta: &BTreeMap<String, String> = &record.meta;
    match (meta.get("shift_kind"), meta.get("intensity")) {
        (Some(k), Some(l)) if k != "none" && !k.is_empty() => format!("{k}:{l}"),
        _ => meta.get("domain").cloned().unwrap_or_else(|| "unknown".into()),
    }
}
