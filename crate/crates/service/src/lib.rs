//! Read-only HTTP API over a directory of inference bundles.
//!
//! Everything is computed from bundles loaded at startup. The only mutating
//! route is `POST /api/embed`, which fits an embedding in the background and
//! publishes it by replacing its cache slot in one step.

mod error;
mod routes;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock, RwLock};

use axum::routing::{get, post};
use axum::Router;

use sf_lens_core::ingest::{load_bundle, IngestError, InferenceBundle, MANIFEST_FILE};
use sf_lens_core::latent::{embed, EmbeddingFrame, EmbeddingParams, EMBEDDINGS_DIR};
use sf_lens_core::metrics::MetricReport;
use sf_lens_core::model::StudyDefinition;
use sf_lens_core::shift::{bundle_studies, ShiftError};
use sf_lens_core::Execution;

pub use error::ApiError;

/// Environment fallback for `--bundle-root`.
pub const BUNDLE_ROOT_ENV: &str = "SF_LENS_BUNDLE_ROOT";
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("no bundle under {}", .0.display())]
    NoBundles(PathBuf),
    #[error("two bundles are named `{0}`")]
    DuplicateName(String),
    #[error("reading {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Shift(#[from] ShiftError),
}

/// One loaded bundle and its studies.
pub struct Dataset {
    pub bundle: InferenceBundle,
    pub studies: Vec<StudyDefinition>,
    report: OnceLock<Result<MetricReport, String>>,
}

impl Dataset {
    pub fn new(bundle: InferenceBundle) -> Result<Self, ShiftError> {
        let studies = bundle_studies(&bundle)?;
        Ok(Dataset {
            bundle,
            studies,
            report: OnceLock::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.bundle.manifest.name
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Running,
    Ready(Arc<EmbeddingFrame>),
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Ready,
    Failed,
}

pub struct AppState {
    datasets: BTreeMap<String, Arc<Dataset>>,
    frames: RwLock<HashMap<String, Slot>>,
    exec: Execution,
}

impl AppState {
    pub fn new(datasets: Vec<Dataset>) -> Result<Self, LoadError> {
        let mut map = BTreeMap::new();
        for d in datasets {
            let name = d.name().to_string();
            if map.insert(name.clone(), Arc::new(d)).is_some() {
                return Err(LoadError::DuplicateName(name));
            }
        }
        Ok(AppState {
            datasets: map,
            frames: RwLock::new(HashMap::new()),
            exec: Execution::default(),
        })
    }

    /// Loads `root` itself when it is a bundle, otherwise every immediate
    /// subdirectory that is one.
    pub fn load(root: &Path) -> Result<Self, LoadError> {
        let io = |source| LoadError::Io {
            path: root.to_path_buf(),
            source,
        };
        let dirs: Vec<PathBuf> = if root.join(MANIFEST_FILE).is_file() {
            vec![root.to_path_buf()]
        } else {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
                .map_err(io)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(MANIFEST_FILE).is_file())
                .collect();
            dirs.sort();
            dirs
        };
        if dirs.is_empty() {
            return Err(LoadError::NoBundles(root.to_path_buf()));
        }
        let datasets = dirs
            .iter()
            .map(|d| Ok(Dataset::new(load_bundle(d)?)?))
            .collect::<Result<Vec<_>, LoadError>>()?;
        AppState::new(datasets)
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn datasets(&self) -> impl Iterator<Item = &Arc<Dataset>> {
        self.datasets.values()
    }

    fn dataset(&self, name: Option<&str>) -> Result<&Arc<Dataset>, ApiError> {
        match name {
            Some(n) => self
                .datasets
                .get(n)
                .ok_or_else(|| ApiError::UnknownEntity(format!("dataset `{n}`"))),
            None if self.datasets.len() == 1 => Ok(self.datasets.values().next().expect("one dataset")),
            None => Err(ApiError::BadParameter(format!(
                "`dataset` is required when serving {} bundles",
                self.datasets.len()
            ))),
        }
    }

    fn report(&self, ds: &Dataset) -> Result<MetricReport, ApiError> {
        ds.report
            .get_or_init(|| routes::full_report(ds, self.exec).map_err(|e| e.to_string()))
            .clone()
            .map_err(ApiError::Internal)
    }

    /// The frame for `key`, reading it from the bundle's cache directory when
    /// it was fit offline.
    fn frame(&self, ds: &Dataset, key: &str) -> Result<Arc<EmbeddingFrame>, ApiError> {
        let slot = self.frames.read().expect("frame lock").get(key).cloned();
        match slot {
            Some(Slot::Ready(f)) => Ok(f),
            Some(Slot::Running) => Err(ApiError::EmbeddingNotReady(format!("embedding `{key}` is still running"))),
            Some(Slot::Failed(e)) => Err(ApiError::BadParameter(format!("embedding `{key}` failed: {e}"))),
            None => match stored_frame(ds, key) {
                Some(f) => {
                    let f = Arc::new(f);
                    self.frames
                        .write()
                        .expect("frame lock")
                        .entry(key.to_string())
                        .or_insert_with(|| Slot::Ready(f.clone()));
                    Ok(f)
                }
                None => Err(ApiError::UnknownEntity(format!(
                    "embedding `{key}` has not been computed (POST /api/embed)"
                ))),
            },
        }
    }

    fn job_status(&self, key: &str) -> Option<(JobStatus, Option<String>)> {
        self.frames.read().expect("frame lock").get(key).map(|s| match s {
            Slot::Running => (JobStatus::Running, None),
            Slot::Ready(_) => (JobStatus::Ready, None),
            Slot::Failed(e) => (JobStatus::Failed, Some(e.clone())),
        })
    }

    /// Starts fitting `params` unless a frame is ready or already running.
    fn submit(self: &Arc<Self>, ds: Arc<Dataset>, params: EmbeddingParams) -> (String, JobStatus) {
        let key = EmbeddingFrame::key_for(&ds.bundle, &params);
        {
            let mut frames = self.frames.write().expect("frame lock");
            match frames.get(&key) {
                Some(Slot::Ready(_)) => return (key, JobStatus::Ready),
                Some(Slot::Running) => return (key, JobStatus::Running),
                _ => {}
            }
            if let Some(f) = stored_frame(&ds, &key) {
                frames.insert(key.clone(), Slot::Ready(Arc::new(f)));
                return (key, JobStatus::Ready);
            }
            frames.insert(key.clone(), Slot::Running);
        }
        let state = Arc::clone(self);
        let job_key = key.clone();
        tokio::spawn(async move {
            let exec = state.exec;
            let fitted = tokio::task::spawn_blocking(move || embed(&ds.bundle, &params, exec)).await;
            let slot = match fitted {
                Ok(Ok(frame)) => Slot::Ready(Arc::new(frame)),
                Ok(Err(e)) => Slot::Failed(e.to_string()),
                Err(e) => Slot::Failed(e.to_string()),
            };
            state.frames.write().expect("frame lock").insert(job_key, slot);
        });
        (key, JobStatus::Running)
    }
}

fn stored_frame(ds: &Dataset, key: &str) -> Option<EmbeddingFrame> {
    let dir = ds.bundle.root()?.join(EMBEDDINGS_DIR);
    EmbeddingFrame::load(&dir, key).ok().filter(|f| f.bundle == ds.name())
}

pub fn app(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/datasets", get(routes::datasets))
        .route("/api/studies", get(routes::studies))
        .route("/api/metrics", get(routes::metrics))
        .route("/api/rc-curve", get(routes::curve))
        .route("/api/embedding", get(routes::embedding))
        .route("/api/embed", post(routes::submit_embedding))
        .route("/api/jobs/{key}", get(routes::job))
        .route("/api/clusters", get(routes::clusters))
        .route("/api/failures", get(routes::failures))
        .route("/api/sweep", get(routes::sweep))
        .route("/api/records/{id}", get(routes::record))
        .route("/api/images/{id}", get(routes::image))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("sf-lens: serving {} bundle(s) on http://{}", state.datasets.len(), listener.local_addr()?);
    axum::serve(listener, app(state)).await
}
