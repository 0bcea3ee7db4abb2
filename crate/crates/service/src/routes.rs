use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;
use std::str::FromStr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use serde_json::{json, Value};

use sf_lens_core::csf::{available_channels, compute_channel, ChannelName};
use sf_lens_core::ingest::Run;
use sf_lens_core::latent::{
    concept_clusters, csf_confusion_colors, intensity_sweep, mine_silent_failures, scope_members, ColorScheme,
    EmbeddingFrame, EmbeddingParams,
};
use sf_lens_core::metrics::{aurc, eaurc, evaluate, rc_curve, MetricReport, MetricsError, StudyData};
use sf_lens_core::model::{default_tau, predict, Predicate};
use sf_lens_core::shift::CorruptionKind;
use sf_lens_core::Execution;

use crate::{ApiError, AppState, Dataset, JobStatus};

type Shared = State<Arc<AppState>>;
type ApiResult<T> = Result<T, ApiError>;

const DEFAULT_TOP: usize = 20;

/// Query string with typed accessors; malformed values are `BadParameter`.
#[derive(serde::Deserialize)]
#[serde(transparent)]
pub(crate) struct Params(HashMap<String, String>);

impl Params {
    fn str(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn required(&self, key: &str) -> ApiResult<&str> {
        self.str(key)
            .ok_or_else(|| ApiError::BadParameter(format!("missing `{key}`")))
    }

    fn parse<T>(&self, key: &str) -> ApiResult<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.str(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| ApiError::BadParameter(format!("`{key}`: {e}")))
            })
            .transpose()
    }

    fn predicate(&self, key: &str) -> ApiResult<Predicate> {
        Ok(self.parse(key)?.unwrap_or(Predicate::All))
    }

    fn channel(&self) -> ApiResult<ChannelName> {
        match self.str("channel") {
            None => Ok(ChannelName::Msr),
            Some(c) => c.parse().map_err(|_| ApiError::UnknownEntity(format!("channel `{c}`"))),
        }
    }
}

fn run<'a>(ds: &'a Dataset, p: &Params) -> ApiResult<(usize, &'a Run)> {
    let r = p.parse("run")?.unwrap_or(0);
    ds.bundle
        .run(r)
        .map(|run| (r, run))
        .ok_or_else(|| ApiError::UnknownEntity(format!("run {r} of `{}`", ds.name())))
}

fn scores(run: &Run, channel: &ChannelName, exec: Execution) -> ApiResult<Vec<f64>> {
    Ok(compute_channel(run, channel, exec)?.scores)
}

pub(crate) fn full_report(ds: &Dataset, exec: Execution) -> Result<MetricReport, MetricsError> {
    let first = &ds.bundle.runs()[0];
    let studies: Vec<_> = ds
        .studies
        .iter()
        .filter(|s| !s.members(first.records()).is_empty())
        .cloned()
        .collect();
    evaluate(&ds.bundle, &studies, &available_channels(first), exec)
}

#[derive(Serialize)]
struct DatasetSummary<'a> {
    name: &'a str,
    n: usize,
    k: usize,
    t: usize,
    d: usize,
    runs: usize,
    channels: Vec<String>,
    tags: Vec<&'a str>,
    studies: usize,
    images: bool,
}

pub(crate) async fn datasets(State(state): Shared) -> Json<Value> {
    let out: Vec<DatasetSummary> = state
        .datasets()
        .map(|ds| {
            let m = &ds.bundle.manifest;
            let first = &ds.bundle.runs()[0];
            DatasetSummary {
                name: &m.name,
                n: m.n,
                k: m.k,
                t: m.t,
                d: m.d,
                runs: m.runs,
                channels: available_channels(first).iter().map(ToString::to_string).collect(),
                tags: m.tag_names().collect(),
                studies: ds.studies.len(),
                images: first.records().iter().any(|r| r.image_ref.is_some()),
            }
        })
        .collect();
    Json(json!(out))
}

pub(crate) async fn studies(State(state): Shared, Query(p): Query<Params>) -> ApiResult<Json<Value>> {
    let ds = state.dataset(p.str("dataset"))?;
    let first = &ds.bundle.runs()[0];
    let out: Vec<Value> = ds
        .studies
        .iter()
        .map(|s| {
            json!({
                "name": s.name,
                "kind": s.kind,
                "predicate": s.predicate.to_string(),
                "size": s.members(first.records()).len(),
            })
        })
        .collect();
    Ok(Json(json!(out)))
}

fn wants_csv(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("text/csv"))
}

pub(crate) async fn metrics(
    State(state): Shared,
    Query(p): Query<Params>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let ds = state.dataset(p.str("dataset"))?;
    let report = state.report(ds)?;
    let study = p.str("study");
    if let Some(s) = study {
        if !report.rows.iter().any(|r| r.study == s) {
            return Err(ApiError::UnknownEntity(format!("study `{s}`")));
        }
    }
    let channel = p.str("channel").map(|_| p.channel()).transpose()?;
    if let Some(c) = &channel {
        if !report.rows.iter().any(|r| &r.channel == c) {
            return Err(ApiError::UnknownEntity(format!("channel `{c}`")));
        }
    }
    let report = report.filtered(study, channel.as_ref());
    Ok(if wants_csv(&headers) {
        ([(header::CONTENT_TYPE, "text/csv")], report.to_csv_string()).into_response()
    } else {
        ([(header::CONTENT_TYPE, "application/json")], report.to_json_string()).into_response()
    })
}

pub(crate) async fn curve(State(state): Shared, Query(p): Query<Params>) -> ApiResult<Json<Value>> {
    let ds = state.dataset(p.str("dataset"))?;
    let name = p.required("study")?;
    let study = ds
        .studies
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| ApiError::UnknownEntity(format!("study `{name}`")))?;
    let channel = p.channel()?;
    let (r, run) = run(ds, &p)?;
    let data = StudyData::collect(run, &study.predicate, &scores(run, &channel, state.exec)?);
    if data.indices.is_empty() {
        return Err(MetricsError::EmptyStudy(name.to_string()).into());
    }
    let curve = rc_curve(&data.residuals, &data.confidences, &data.ids)?;
    let points: Vec<(f64, f64)> = match p.parse::<usize>("points")? {
        Some(0) => return Err(ApiError::BadParameter("`points` must be positive".into())),
        Some(m) => curve.thinned(m),
        None => curve.coverage.iter().copied().zip(curve.risk.iter().copied()).collect(),
    };
    Ok(Json(json!({
        "study": study.name,
        "channel": channel,
        "run": r,
        "n": curve.len(),
        "aurc": aurc(&curve),
        "eaurc": eaurc(&curve),
        "coverage": points.iter().map(|p| p.0).collect::<Vec<_>>(),
        "risk": points.iter().map(|p| p.1).collect::<Vec<_>>(),
    })))
}

fn frame_params(ds: &Dataset, p: &Params) -> ApiResult<EmbeddingParams> {
    let mut params = EmbeddingParams {
        scope: p.predicate("scope")?,
        run: run(ds, p)?.0,
        ..Default::default()
    };
    if let Some(seed) = p.parse("seed")? {
        params.tsne.seed = seed;
    }
    if let Some(perplexity) = p.parse::<f64>("perplexity")? {
        if !(perplexity.is_finite() && perplexity > 0.0) {
            return Err(ApiError::BadParameter(format!("`perplexity` must be positive, got {perplexity}")));
        }
        params.tsne.perplexity = perplexity;
    }
    if let Some(iterations) = p.parse("iterations")? {
        params.tsne.iterations = iterations;
    }
    if let Some(dims) = p.parse("pca_dims")? {
        params.pca_dims = dims;
    }
    Ok(params)
}

/// The ready frame addressed by the query's embedding parameters.
fn ready_frame(state: &AppState, ds: &Dataset, p: &Params) -> ApiResult<(String, Arc<EmbeddingFrame>)> {
    let params = frame_params(ds, p)?;
    let key = EmbeddingFrame::key_for(&ds.bundle, &params);
    let frame = state.frame(ds, &key)?;
    Ok((key, frame))
}

pub(crate) async fn submit_embedding(State(state): Shared, Query(p): Query<Params>) -> ApiResult<Response> {
    let ds = Arc::clone(state.dataset(p.str("dataset"))?);
    let params = frame_params(&ds, &p)?;
    if scope_members(&ds.bundle.runs()[params.run], &params.scope).is_empty() {
        return Err(ApiError::UnknownEntity(format!("no record matches scope `{}`", params.scope)));
    }
    let (key, status) = state.submit(ds, params);
    let code = match status {
        JobStatus::Ready => StatusCode::OK,
        _ => StatusCode::ACCEPTED,
    };
    Ok((code, Json(json!({ "key": key, "status": status }))).into_response())
}

pub(crate) async fn job(State(state): Shared, Path(key): Path<String>) -> ApiResult<Json<Value>> {
    let (status, error) = state
        .job_status(&key)
        .ok_or_else(|| ApiError::UnknownEntity(format!("job `{key}`")))?;
    Ok(Json(json!({ "key": key, "status": status, "error": error })))
}

pub(crate) async fn embedding(State(state): Shared, Query(p): Query<Params>) -> ApiResult<Json<Value>> {
    let ds = state.dataset(p.str("dataset"))?;
    let scheme: Option<ColorScheme> = p.parse("scheme")?;
    let tau: Option<f64> = p.parse("tau")?;
    if let Some(t) = tau {
        if !t.is_finite() {
            return Err(ApiError::BadParameter(format!("`tau` must be finite, got {t}")));
        }
    }
    let (key, frame) = ready_frame(&state, ds, &p)?;
    let mut body = frame.to_json_with_coords();
    body["key"] = json!(key);
    let Some(scheme) = scheme else {
        return Ok(Json(body));
    };
    let labels = if scheme == ColorScheme::CsfConfusion {
        let channel = p.channel()?;
        let run = &ds.bundle.runs()[frame.params.run];
        let all = scores(run, &channel, state.exec)?;
        let tau = match tau {
            Some(t) => t,
            None => {
                let members: Vec<f64> = frame
                    .ids
                    .iter()
                    .filter_map(|id| run.position(id).map(|i| all[i]))
                    .collect();
                default_tau(&members).expect("frames are never empty")
            }
        };
        body["tau"] = json!(tau);
        body["channel"] = json!(channel);
        csf_confusion_colors(&frame, run, &all, tau)?
    } else {
        frame.colors.get(scheme.as_str()).cloned().unwrap_or_default()
    };
    body["scheme"] = json!(scheme);
    body["colors"] = json!(BTreeMap::from([(scheme.as_str(), labels)]));
    Ok(Json(body))
}

pub(crate) async fn clusters(State(state): Shared, Query(p): Query<Params>) -> ApiResult<Json<Value>> {
    let ds = state.dataset(p.str("dataset"))?;
    let concept = p.required("concept")?;
    let predicate: Predicate = concept
        .parse()
        .map_err(|e| ApiError::BadParameter(format!("`concept`: {e}")))?;
    let (_, frame) = ready_frame(&state, ds, &p)?;
    let run = &ds.bundle.runs()[frame.params.run];
    let cluster = concept_clusters(&frame, run, concept, &predicate, frame.params.tsne.seed, state.exec)?;
    Ok(Json(json!(cluster)))
}

pub(crate) async fn failures(State(state): Shared, Query(p): Query<Params>) -> ApiResult<Json<Value>> {
    let ds = state.dataset(p.str("dataset"))?;
    let (_, run) = run(ds, &p)?;
    let scope = scope_members(run, &p.predicate("scope")?);
    let top = p.parse("top")?.unwrap_or(DEFAULT_TOP);
    let all = scores(run, &p.channel()?, state.exec)?;
    Ok(Json(json!(mine_silent_failures(run, &scope, &all, top))))
}

pub(crate) async fn sweep(State(state): Shared, Query(p): Query<Params>) -> ApiResult<Json<Value>> {
    let ds = state.dataset(p.str("dataset"))?;
    let (_, run) = run(ds, &p)?;
    let id = p.required("id")?;
    let kind: CorruptionKind = p
        .parse("kind")?
        .ok_or_else(|| ApiError::BadParameter("missing `kind`".into()))?;
    let all = scores(run, &p.channel()?, state.exec)?;
    Ok(Json(json!(intensity_sweep(run, id, kind, &all)?)))
}

pub(crate) async fn record(
    State(state): Shared,
    Path(id): Path<String>,
    Query(p): Query<Params>,
) -> ApiResult<Json<Value>> {
    let ds = state.dataset(p.str("dataset"))?;
    let (r, run) = run(ds, &p)?;
    let i = run
        .position(&id)
        .ok_or_else(|| ApiError::UnknownEntity(format!("record `{id}`")))?;
    let channel = p.channel()?;
    let confidence = scores(run, &channel, state.exec)?[i];
    let rec = &run.records()[i];
    Ok(Json(json!({
        "id": rec.id,
        "run": r,
        "label": rec.label,
        "prediction": predict(rec),
        "channel": channel,
        "confidence": confidence,
        "meta": rec.meta,
        "image_ref": rec.image_ref,
    })))
}

pub(crate) async fn image(
    State(state): Shared,
    Path(id): Path<String>,
    Query(p): Query<Params>,
) -> ApiResult<Response> {
    let candidates: Vec<&Arc<Dataset>> = match p.str("dataset") {
        Some(_) => vec![state.dataset(p.str("dataset"))?],
        None => state.datasets().collect(),
    };
    let path = candidates
        .iter()
        .find_map(|ds| {
            ds.bundle
                .runs()
                .iter()
                .find_map(|run| run.get(&id))
                .and_then(|rec| ds.bundle.image_path(rec))
        })
        .ok_or_else(|| ApiError::UnknownEntity(format!("image of `{id}`")))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::UnknownEntity(format!("image of `{id}`: {}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}
