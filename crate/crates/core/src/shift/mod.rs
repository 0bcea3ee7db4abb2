//! Distribution-shift construction: image corruptions and source/target
//! splits over record metadata.

mod corrupt;
mod image;
mod split;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ingest::InferenceBundle;
use crate::model::{Predicate, StudyDefinition, StudyKind};

pub use corrupt::{corrupt, corrupt_batch, corrupt_directory, variant_id, CorruptedImage};
pub use image::Image;
pub use split::{apply_split, builtin_presets, find_preset, SplitPreset, TargetRule};

#[derive(Debug, thiserror::Error)]
pub enum ShiftError {
    #[error("UnsupportedImage: {channels} channels (expected 1 or 3)")]
    UnsupportedImage { channels: usize },
    #[error("InvalidLevel: {0} (expected 1..=5)")]
    InvalidLevel(u8),
    #[error("MissingTag: preset `{preset}` needs metadata tag `{tag}`")]
    MissingTag { preset: String, tag: String },
    #[error("UnknownPreset: `{0}`")]
    UnknownPreset(String),
    #[error("ImageDecode: {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },
    #[error("Io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ShiftError + '_ {
    move |source| ShiftError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    BrightnessUp,
    BrightnessDown,
    MotionBlur,
    Elastic,
    GaussianNoise,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::BrightnessUp,
        CorruptionKind::BrightnessDown,
        CorruptionKind::MotionBlur,
        CorruptionKind::Elastic,
        CorruptionKind::GaussianNoise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::BrightnessUp => "brightness_up",
            CorruptionKind::BrightnessDown => "brightness_down",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Elastic => "elastic",
            CorruptionKind::GaussianNoise => "gaussian_noise",
        }
    }

    /// Severity parameter for `level` in `1..=5`: the additive shift for
    /// brightness, kernel length (px) for blur, displacement scale (px) for
    /// elastic, standard deviation for noise.
    pub fn parameter(self, level: u8) -> Result<f64, ShiftError> {
        if !(1..=5).contains(&level) {
            return Err(ShiftError::InvalidLevel(level));
        }
        let i = usize::from(level - 1);
        Ok(match self {
            CorruptionKind::BrightnessUp => [0.1, 0.2, 0.3, 0.4, 0.5][i],
            CorruptionKind::BrightnessDown => [-0.1, -0.2, -0.3, -0.4, -0.5][i],
            CorruptionKind::MotionBlur => [5.0, 9.0, 13.0, 17.0, 21.0][i],
            CorruptionKind::Elastic => [8.0, 16.0, 24.0, 32.0, 40.0][i],
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10][i],
        })
    }

    fn parameter_name(self) -> &'static str {
        match self {
            CorruptionKind::BrightnessUp | CorruptionKind::BrightnessDown => "beta",
            CorruptionKind::MotionBlur => "kernel_length",
            CorruptionKind::Elastic => "alpha",
            CorruptionKind::GaussianNoise => "sigma",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = CorruptionKind::ALL.iter().map(|k| k.as_str()).collect();
                format!("unknown corruption `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// Blur angle, degrees from the horizontal.
pub const MOTION_BLUR_ANGLE: f64 = 45.0;
/// Smoothing width (px) of the elastic displacement field.
pub const ELASTIC_SIGMA: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub level: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, level: u8, seed: u64) -> Result<Self, ShiftError> {
        kind.parameter(level)?;
        Ok(CorruptionSpec { kind, level, seed })
    }

    pub fn parameter(&self) -> f64 {
        self.kind.parameter(self.level).expect("level checked on construction")
    }

    pub fn parameters(&self) -> BTreeMap<String, serde_json::Value> {
        let mut p = BTreeMap::from([
            ("kind".to_string(), self.kind.as_str().into()),
            ("level".to_string(), self.level.into()),
            ("seed".to_string(), self.seed.into()),
            (self.kind.parameter_name().to_string(), self.parameter().into()),
        ]);
        match self.kind {
            CorruptionKind::MotionBlur => {
                p.insert("angle_deg".into(), MOTION_BLUR_ANGLE.into());
            }
            CorruptionKind::Elastic => {
                p.insert("smoothing_sigma".into(), ELASTIC_SIGMA.into());
            }
            _ => {}
        }
        p
    }

    /// Study name used for records carrying this corruption.
    pub fn study_name(&self) -> String {
        format!("cor:{}:{}", self.kind, self.level)
    }
}

/// One entry of a generated-studies manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedStudy {
    pub name: String,
    pub kind: StudyKind,
    pub predicate: Predicate,
    #[serde(default)]
    pub parameters: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub members: Vec<String>,
}

impl GeneratedStudy {
    pub fn definition(&self) -> StudyDefinition {
        StudyDefinition::new(self.name.clone(), self.kind, self.predicate.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub studies: Vec<GeneratedStudy>,
}

impl StudyManifest {
    pub fn definitions(&self) -> Vec<StudyDefinition> {
        self.studies.iter().map(GeneratedStudy::definition).collect()
    }

    pub fn load(path: &Path) -> Result<Self, ShiftError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| ShiftError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ShiftError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, format!("{json}\n")).map_err(io_err(path))
    }
}

/// Where `split` and `corrupt` leave study definitions inside a bundle.
pub const STUDIES_FILE: &str = "studies.json";

/// The bundle's default studies, overridden by name and extended by the
/// bundle's `studies.json` when it has one.
pub fn bundle_studies(bundle: &InferenceBundle) -> Result<Vec<StudyDefinition>, ShiftError> {
    let mut out = crate::metrics::default_studies(bundle);
    let Some(path) = bundle.root().map(|r| r.join(STUDIES_FILE)).filter(|p| p.exists()) else {
        return Ok(out);
    };
    for def in StudyManifest::load(&path)?.definitions() {
        match out.iter_mut().find(|d| d.name == def.name) {
            Some(slot) => *slot = def,
            None => out.push(def),
        }
    }
    Ok(out)
}
