//! On-disk inference bundles.
//!
//! Layout of a bundle directory:
//!
//! ```text
//! manifest.json
//! images/<id>.png            optional, directory named by manifest.image_dir
//! run_0/labels.u32           n x u32 LE
//! run_0/logits.f32           n*k x f32 LE, row-major
//! run_0/mcd_logits.f32       n*t*k, present iff t > 0
//! run_0/latents.f32          n*d
//! run_0/dg_logits.f32        n*(k+1), present iff manifest.dg
//! run_0/ext_conf_<name>.f32  n, one per declared channel
//! run_0/metadata.csv         header `id,<tags...>`, one row per record
//! run_1/...
//! ```
//!
//! Tensor files are raw little-endian IEEE-754 with no header; shapes come
//! from the manifest only.

mod lidc;
mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{InferenceRecord, LogitVector, McdLogitStack, ModelError};

pub use lidc::{derive_lidc_label, LidcLabel};
pub use synth::{generate_synthetic_bundle, SyntheticSpec, SYNTHETIC_RANDOM_CHANNEL};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("MissingFile: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("InvalidManifest: {0}")]
    InvalidManifest(String),
    #[error("ShapeMismatch: {file} has {actual} bytes, manifest dims require {expected}")]
    ShapeMismatch {
        file: String,
        expected: usize,
        actual: usize,
    },
    #[error("NonFiniteValue: {file} at record {record}")]
    NonFiniteValue { file: String, record: usize },
    #[error("UnknownMetaTag: `{tag}` is not declared in the manifest meta_schema")]
    UnknownMetaTag { tag: String },
    #[error("InvalidMetaValue: tag `{tag}` has undeclared value `{value}` at record {record}")]
    InvalidMetaValue {
        tag: String,
        value: String,
        record: usize,
    },
    #[error("MetadataRows: metadata.csv in {run} has {actual} rows, expected {expected}")]
    MetadataRows {
        run: String,
        expected: usize,
        actual: usize,
    },
    #[error("MalformedMetadata: {0}")]
    MalformedMetadata(String),
    #[error("LabelOutOfRange: record {record} has label {label}, class count is {k}")]
    LabelOutOfRange { record: usize, label: u64, k: usize },
    #[error("DuplicateId: `{id}` appears more than once in run {run}")]
    DuplicateId { id: String, run: usize },
    #[error("InvalidRecord: record {record}: {source}")]
    InvalidRecord {
        record: usize,
        #[source]
        source: ModelError,
    },
    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),
    #[error("RatingOutOfRange: rating {0} outside [1, 5]")]
    RatingOutOfRange(f64),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IngestError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::NotFound {
            IngestError::MissingFile(path.to_path_buf())
        } else {
            IngestError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// A metadata tag and its admissible values (empty = free-form).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaTag {
    pub name: String,
    #[serde(default)]
    pub values: Vec<String>,
}

impl MetaTag {
    pub fn free(name: impl Into<String>) -> Self {
        MetaTag {
            name: name.into(),
            values: Vec::new(),
        }
    }

    pub fn closed<I, S>(name: impl Into<String>, values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        MetaTag {
            name: name.into(),
            values: values.into_iter().map(Into::into).collect(),
        }
    }

    pub fn admits(&self, value: &str) -> bool {
        self.values.is_empty() || value.is_empty() || self.values.iter().any(|v| v == value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub name: String,
    /// Records per run.
    pub n: usize,
    /// Class count.
    pub k: usize,
    /// MCD samples per record; 0 = no stacks.
    pub t: usize,
    /// Latent dimension.
    pub d: usize,
    #[serde(default)]
    pub channels: Vec<String>,
    #[serde(default)]
    pub meta_schema: Vec<MetaTag>,
    #[serde(default)]
    pub image_dir: Option<String>,
    pub runs: usize,
    /// Whether `dg_logits.f32` (k+1 wide) is present.
    #[serde(default)]
    pub dg: bool,
}

impl BundleManifest {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: String| Err(IngestError::InvalidManifest(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.n < 1 {
            return bad("n must be >= 1".into());
        }
        if self.k < 2 {
            return bad("k must be >= 2".into());
        }
        if self.d < 1 {
            return bad("d must be >= 1".into());
        }
        if self.runs < 1 {
            return bad("runs must be >= 1".into());
        }
        let mut seen = HashSet::new();
        for tag in &self.meta_schema {
            if tag.name == "id" || tag.name.is_empty() || !seen.insert(tag.name.as_str()) {
                return bad(format!("bad or duplicate meta tag `{}`", tag.name));
            }
        }
        let mut seen = HashSet::new();
        for ch in &self.channels {
            let ok = !ch.is_empty()
                && ch
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok || !seen.insert(ch.as_str()) {
                return bad(format!("bad or duplicate channel name `{ch}`"));
            }
        }
        Ok(())
    }

    pub fn meta_tag(&self, name: &str) -> Option<&MetaTag> {
        self.meta_schema.iter().find(|t| t.name == name)
    }

    pub fn tag_names(&self) -> impl Iterator<Item = &str> + Clone {
        self.meta_schema.iter().map(|t| t.name.as_str())
    }
}

/// Records of one training-seed replica.
#[derive(Debug, Clone)]
pub struct Run {
    records: Vec<InferenceRecord>,
    index: HashMap<String, usize>,
}

impl PartialEq for Run {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl Run {
    /// Wraps records; ids must be unique.
    pub fn new(records: Vec<InferenceRecord>, run: usize) -> Result<Self, IngestError> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(IngestError::DuplicateId {
                    id: r.id.clone(),
                    run,
                });
            }
        }
        Ok(Run { records, index })
    }

    pub fn records(&self) -> &[InferenceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&InferenceRecord> {
        self.position(id).map(|i| &self.records[i])
    }

    /// Overwrites one metadata tag for every record.
    pub fn set_meta<F>(&mut self, tag: &str, mut value: F)
    where
        F: FnMut(&InferenceRecord) -> String,
    {
        for r in &mut self.records {
            let v = value(r);
            r.meta.insert(tag.to_string(), v);
        }
    }
}

#[derive(Debug, Clone)]
pub struct InferenceBundle {
    pub manifest: BundleManifest,
    runs: Vec<Run>,
    root: Option<PathBuf>,
}

impl PartialEq for InferenceBundle {
    fn eq(&self, other: &Self) -> bool {
        self.manifest == other.manifest && self.runs == other.runs
    }
}

impl InferenceBundle {
    /// Assembles a bundle, checking every invariant the loader checks.
    pub fn new(manifest: BundleManifest, runs: Vec<Run>) -> Result<Self, IngestError> {
        manifest.validate()?;
        if runs.len() != manifest.runs {
            return Err(IngestError::InvalidManifest(format!(
                "manifest declares {} runs, {} provided",
                manifest.runs,
                runs.len()
            )));
        }
        for run in &runs {
            if run.len() != manifest.n {
                return Err(IngestError::InvalidManifest(format!(
                    "manifest declares n = {}, run has {} records",
                    manifest.n,
                    run.len()
                )));
            }
            for (i, r) in run.records.iter().enumerate() {
                check_record(&manifest, i, r)?;
            }
        }
        Ok(InferenceBundle {
            manifest,
            runs,
            root: None,
        })
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn run(&self, index: usize) -> Option<&Run> {
        self.runs.get(index)
    }

    pub fn runs_mut(&mut self) -> &mut [Run] {
        &mut self.runs
    }

    /// Directory the bundle was loaded from, if any.
    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = Some(root.into());
        self
    }

    /// Absolute path of a record's image, when it has one.
    pub fn image_path(&self, record: &InferenceRecord) -> Option<PathBuf> {
        let root = self.root.as_ref()?;
        record.image_ref.as_ref().map(|r| root.join(r))
    }
}

fn check_record(m: &BundleManifest, i: usize, r: &InferenceRecord) -> Result<(), IngestError> {
    let shape = |what: &'static str, expected: usize, actual: usize| IngestError::InvalidRecord {
        record: i,
        source: ModelError::Shape {
            what,
            expected,
            actual,
        },
    };
    if r.logits.num_classes() != m.k {
        return Err(shape("logits", m.k, r.logits.num_classes()));
    }
    if r.label >= m.k {
        return Err(IngestError::LabelOutOfRange {
            record: i,
            label: r.label as u64,
            k: m.k,
        });
    }
    match (&r.mcd, m.t) {
        (None, 0) => {}
        (Some(s), t) if s.num_samples() == t && s.num_classes() == m.k => {}
        (s, t) => {
            return Err(shape(
                "mcd stack",
                t * m.k,
                s.as_ref().map_or(0, |s| s.as_flat().len()),
            ))
        }
    }
    match (&r.dg_logits, m.dg) {
        (None, false) => {}
        (Some(v), true) if v.len() == m.k + 1 => {}
        (v, _) => {
            return Err(shape(
                "dg logits",
                if m.dg { m.k + 1 } else { 0 },
                v.as_ref().map_or(0, Vec::len),
            ))
        }
    }
    if r.latent.len() != m.d {
        return Err(shape("latent", m.d, r.latent.len()));
    }
    for name in &m.channels {
        match r.ext_conf.get(name) {
            Some(v) if v.is_finite() => {}
            Some(_) => {
                return Err(IngestError::NonFiniteValue {
                    file: format!("ext_conf_{name}.f32"),
                    record: i,
                })
            }
            None => return Err(IngestError::InvalidManifest(format!(
                "record {i} lacks declared channel `{name}`"
            ))),
        }
    }
    if let Some(extra) = r.ext_conf.keys().find(|k| !m.channels.contains(k)) {
        return Err(IngestError::InvalidManifest(format!(
            "record {i} carries undeclared channel `{extra}`"
        )));
    }
    for (tag, value) in &r.meta {
        let decl = m
            .meta_tag(tag)
            .ok_or_else(|| IngestError::UnknownMetaTag { tag: tag.clone() })?;
        if !decl.admits(value) {
            return Err(IngestError::InvalidMetaValue {
                tag: tag.clone(),
                value: value.clone(),
                record: i,
            });
        }
    }
    if r.latent.iter().any(|v| !v.is_finite()) {
        return Err(IngestError::NonFiniteValue {
            file: "latents.f32".into(),
            record: i,
        });
    }
    if r.dg_logits.as_ref().is_some_and(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(IngestError::NonFiniteValue {
            file: "dg_logits.f32".into(),
            record: i,
        });
    }
    Ok(())
}

pub fn run_dir(root: &Path, run: usize) -> PathBuf {
    root.join(format!("run_{run}"))
}

fn read_exact_len(path: &Path, expected_bytes: usize) -> Result<Vec<u8>, IngestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected_bytes {
        return Err(IngestError::ShapeMismatch {
            file: display_name(path),
            expected: expected_bytes,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

fn display_name(path: &Path) -> String {
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned());
    let parent = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|f| f.to_string_lossy().into_owned());
    match (parent, file) {
        (Some(p), Some(f)) => format!("{p}/{f}"),
        (None, Some(f)) => f,
        _ => path.display().to_string(),
    }
}

/// Reads `rows * width` little-endian f32 values, rejecting non-finite ones.
fn read_f32_tensor(path: &Path, rows: usize, width: usize) -> Result<Vec<f32>, IngestError> {
    let bytes = read_exact_len(path, rows * width * 4)?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(IngestError::NonFiniteValue {
            file: display_name(path),
            record: pos / width.max(1),
        });
    }
    Ok(values)
}

fn read_u32_tensor(path: &Path, len: usize) -> Result<Vec<u32>, IngestError> {
    let bytes = read_exact_len(path, len * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn f32_bytes<'a>(values: impl Iterator<Item = &'a f32>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_manifest(root: &Path) -> Result<BundleManifest, IngestError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: BundleManifest = serde_json::from_str(&text)
        .map_err(|e| IngestError::InvalidManifest(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads and fully validates a bundle directory.
pub fn load_bundle(root: impl AsRef<Path>) -> Result<InferenceBundle, IngestError> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    let mut runs = Vec::with_capacity(manifest.runs);
    for r in 0..manifest.runs {
        let dir = run_dir(root, r);
        if !dir.is_dir() {
            return Err(IngestError::MissingFile(dir));
        }
        runs.push(load_run(root, &dir, &manifest, r)?);
    }
    Ok(InferenceBundle::new(manifest, runs)?.with_root(root))
}

fn load_run(
    root: &Path,
    dir: &Path,
    m: &BundleManifest,
    run: usize,
) -> Result<Run, IngestError> {
    let n = m.n;
    let labels = read_u32_tensor(&dir.join("labels.u32"), n)?;
    let logits = read_f32_tensor(&dir.join("logits.f32"), n, m.k)?;
    let latents = read_f32_tensor(&dir.join("latents.f32"), n, m.d)?;
    let mcd = if m.t > 0 {
        Some(read_f32_tensor(&dir.join("mcd_logits.f32"), n, m.t * m.k)?)
    } else {
        None
    };
    let dg = if m.dg {
        Some(read_f32_tensor(&dir.join("dg_logits.f32"), n, m.k + 1)?)
    } else {
        None
    };
    let mut channels = Vec::with_capacity(m.channels.len());
    for name in &m.channels {
        let path = dir.join(format!("ext_conf_{name}.f32"));
        channels.push((name.clone(), read_f32_tensor(&path, n, 1)?));
    }
    let (ids, meta) = read_metadata(&dir.join("metadata.csv"), m, run)?;

    let mut records = Vec::with_capacity(n);
    for (i, (id, meta)) in ids.into_iter().zip(meta).enumerate() {
        let label = labels[i];
        if label as usize >= m.k {
            return Err(IngestError::LabelOutOfRange {
                record: i,
                label: label as u64,
                k: m.k,
            });
        }
        let to_invalid = |source| IngestError::InvalidRecord { record: i, source };
        let record_logits =
            LogitVector::new(logits[i * m.k..(i + 1) * m.k].to_vec()).map_err(to_invalid)?;
        let record_mcd = match &mcd {
            Some(all) => {
                let w = m.t * m.k;
                Some(
                    McdLogitStack::new(m.t, m.k, all[i * w..(i + 1) * w].to_vec())
                        .map_err(to_invalid)?,
                )
            }
            None => None,
        };
        let image_ref = m.image_dir.as_ref().and_then(|d| {
            let rel = format!("{d}/{id}.png");
            root.join(&rel).is_file().then_some(rel)
        });
        records.push(InferenceRecord {
            label: label as usize,
            logits: record_logits,
            mcd: record_mcd,
            dg_logits: dg
                .as_ref()
                .map(|all| all[i * (m.k + 1)..(i + 1) * (m.k + 1)].to_vec()),
            latent: latents[i * m.d..(i + 1) * m.d].to_vec(),
            ext_conf: channels
                .iter()
                .map(|(name, v)| (name.clone(), v[i]))
                .collect(),
            meta,
            image_ref,
            id,
        });
    }
    Run::new(records, run)
}

type MetaRows = (Vec<String>, Vec<BTreeMap<String, String>>);

fn read_metadata(path: &Path, m: &BundleManifest, run: usize) -> Result<MetaRows, IngestError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let malformed = |e: csv::Error| IngestError::MalformedMetadata(format!("{}: {e}", path.display()));
    let headers = reader.headers().map_err(malformed)?.clone();
    if headers.get(0) != Some("id") {
        return Err(IngestError::MalformedMetadata(format!(
            "{}: first column must be `id`",
            path.display()
        )));
    }
    let tags: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    for tag in &tags {
        if m.meta_tag(tag).is_none() {
            return Err(IngestError::UnknownMetaTag { tag: tag.clone() });
        }
    }
    let mut ids = Vec::with_capacity(m.n);
    let mut metas = Vec::with_capacity(m.n);
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(malformed)?;
        let id = row.get(0).unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(IngestError::MalformedMetadata(format!(
                "{}: empty id at record {i}",
                path.display()
            )));
        }
        let mut meta = BTreeMap::new();
        for (tag, value) in tags.iter().zip(row.iter().skip(1)) {
            if !m.meta_tag(tag).is_some_and(|t| t.admits(value)) {
                return Err(IngestError::InvalidMetaValue {
                    tag: tag.clone(),
                    value: value.to_string(),
                    record: i,
                });
            }
            meta.insert(tag.clone(), value.to_string());
        }
        ids.push(id);
        metas.push(meta);
    }
    if ids.len() != m.n {
        return Err(IngestError::MetadataRows {
            run: format!("run_{run}"),
            expected: m.n,
            actual: ids.len(),
        });
    }
    Ok((ids, metas))
}

/// Writes a bundle in the on-disk layout. Images are not copied.
pub fn write_bundle(bundle: &InferenceBundle, root: impl AsRef<Path>) -> Result<(), IngestError> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(io_err(root))?;
    let m = &bundle.manifest;
    let manifest_path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(m)
        .map_err(|e| IngestError::InvalidManifest(e.to_string()))?;
    write_file(&manifest_path, format!("{json}\n").as_bytes())?;

    for (r, run) in bundle.runs.iter().enumerate() {
        let dir = run_dir(root, r);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let recs = run.records();
        let labels: Vec<u8> = recs
            .iter()
            .flat_map(|r| (r.label as u32).to_le_bytes())
            .collect();
        write_file(&dir.join("labels.u32"), &labels)?;
        write_file(
            &dir.join("logits.f32"),
            &f32_bytes(recs.iter().flat_map(|r| r.logits.values())),
        )?;
        write_file(
            &dir.join("latents.f32"),
            &f32_bytes(recs.iter().flat_map(|r| r.latent.iter())),
        )?;
        if m.t > 0 {
            write_file(
                &dir.join("mcd_logits.f32"),
                &f32_bytes(
                    recs.iter()
                        .flat_map(|r| r.mcd.as_ref().map(|s| s.as_flat()).unwrap_or(&[])),
                ),
            )?;
        }
        if m.dg {
            write_file(
                &dir.join("dg_logits.f32"),
                &f32_bytes(recs.iter().flat_map(|r| r.dg_logits.as_deref().unwrap_or(&[]))),
            )?;
        }
        for name in &m.channels {
            write_file(
                &dir.join(format!("ext_conf_{name}.f32")),
                &f32_bytes(recs.iter().map(|r| &r.ext_conf[name])),
            )?;
        }
        write_metadata(&dir.join("metadata.csv"), m, recs)?;
    }
    Ok(())
}

/// Rewrites only the metadata tables of an existing bundle directory.
pub fn write_metadata_tables(bundle: &InferenceBundle, root: impl AsRef<Path>) -> Result<(), IngestError> {
    let root = root.as_ref();
    let json = serde_json::to_string_pretty(&bundle.manifest)
        .map_err(|e| IngestError::InvalidManifest(e.to_string()))?;
    write_file(&root.join(MANIFEST_FILE), format!("{json}\n").as_bytes())?;
    for (r, run) in bundle.runs.iter().enumerate() {
        write_metadata(&run_dir(root, r).join("metadata.csv"), &bundle.manifest, run.records())?;
    }
    Ok(())
}

fn write_metadata(
    path: &Path,
    m: &BundleManifest,
    records: &[InferenceRecord],
) -> Result<(), IngestError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let wrap = |e: csv::Error| IngestError::MalformedMetadata(format!("{}: {e}", path.display()));
    let mut header = vec!["id"];
    header.extend(m.tag_names());
    w.write_record(&header).map_err(wrap)?;
    for r in records {
        let mut row = vec![r.id.as_str()];
        row.extend(m.tag_names().map(|t| r.meta.get(t).map_or("", String::as_str)));
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|e| IngestError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Adds a tag to the manifest schema (no-op if present) and widens its
/// admissible values with `values`.
pub fn declare_tag(manifest: &mut BundleManifest, name: &str, values: &[&str]) {
    match manifest.meta_schema.iter_mut().find(|t| t.name == name) {
        Some(tag) => {
            if !tag.values.is_empty() {
                for v in values {
                    if !tag.values.iter().any(|x| x == v) {
                        tag.values.push(v.to_string());
                    }
                }
            }
        }
        None => manifest
            .meta_schema
            .push(MetaTag::closed(name, values.iter().copied())),
    }
}
