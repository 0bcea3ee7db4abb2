use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::Serialize;

use super::{GeneratedStudy, ShiftError, StudyManifest};
use crate::ingest::{declare_tag, InferenceBundle};
use crate::model::{Predicate, StudyKind};

/// How a preset selects its target domain.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum TargetRule {
    Predicate { predicate: Predicate },
    /// The `count` largest distinct values of `tag` (numeric order when
    /// every value parses as a number, lexicographic otherwise).
    LastValues { tag: String, count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitPreset {
    pub name: String,
    pub family: String,
    pub kind: StudyKind,
    pub target: TargetRule,
}

impl SplitPreset {
    fn new(name: &str, family: &str, kind: StudyKind, target: TargetRule) -> Self {
        SplitPreset {
            name: name.into(),
            family: family.into(),
            kind,
            target,
        }
    }

    pub fn tags(&self) -> BTreeSet<String> {
        match &self.target {
            TargetRule::Predicate { predicate } => predicate.tags(),
            TargetRule::LastValues { tag, .. } => BTreeSet::from([tag.clone()]),
        }
    }

    /// Resolves the rule against the bundle's first run.
    pub fn target_predicate(&self, bundle: &InferenceBundle) -> Predicate {
        match &self.target {
            TargetRule::Predicate { predicate } => predicate.clone(),
            TargetRule::LastValues { tag, count } => {
                let mut values: Vec<String> = bundle
                    .runs()
                    .first()
                    .map(|run| {
                        run.records()
                            .iter()
                            .filter_map(|r| r.meta.get(tag))
                            .filter(|v| !v.is_empty())
                            .cloned()
                            .collect::<BTreeSet<_>>()
                            .into_iter()
                            .collect()
                    })
                    .unwrap_or_default();
                let numeric: Option<Vec<f64>> =
                    values.iter().map(|v| v.parse::<f64>().ok()).collect();
                if let Some(nums) = numeric {
                    let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(values).collect();
                    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
                    values = pairs.into_iter().map(|p| p.1).collect();
                }
                let keep = values.split_off(values.len().saturating_sub(*count));
                Predicate::one_of(tag.clone(), keep)
            }
        }
    }
}

fn rule(p: Predicate) -> TargetRule {
    TargetRule::Predicate { predicate: p }
}

/// The eight built-in source/target splits.
pub fn builtin_presets() -> Vec<SplitPreset> {
    use StudyKind::{Acq, Man};
    vec![
        SplitPreset::new("mskcc-acq", "dermoscopy", Acq, rule(Predicate::eq("site", "MSKCC"))),
        SplitPreset::new("hcb-acq", "dermoscopy", Acq, rule(Predicate::eq("site", "HCB"))),
        SplitPreset::new(
            "keratosis-man",
            "dermoscopy",
            Man,
            rule(Predicate::one_of("subclass", ["keratosis-like", "actinic keratosis"])),
        ),
        SplitPreset::new("nih14-acq", "chest-xray", Acq, rule(Predicate::eq("dataset", "nih14"))),
        SplitPreset::new(
            "chexpert-acq",
            "chest-xray",
            Acq,
            rule(Predicate::eq("dataset", "chexpert")),
        ),
        SplitPreset::new(
            "batch-acq",
            "fc-microscopy",
            Acq,
            TargetRule::LastValues {
                tag: "batch".into(),
                count: 10,
            },
        ),
        SplitPreset::new(
            "lidc-spiculation-man",
            "lidc",
            Man,
            rule(Predicate::Gt {
                tag: "spiculation".into(),
                value: 2.0,
            }),
        ),
        SplitPreset::new(
            "lidc-texture-man",
            "lidc",
            Man,
            rule(Predicate::Lt {
                tag: "texture".into(),
                value: 3.0,
            }),
        ),
    ]
}

pub fn find_preset(name: &str) -> Result<SplitPreset, ShiftError> {
    builtin_presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| ShiftError::UnknownPreset(name.into()))
}

/// Tags every record of every run `domain=source|target` and returns the
/// `iid` (source) study and a target study named after the preset. When the
/// bundle carries `shift_kind`, both studies are restricted to clean records.
pub fn apply_split(
    bundle: &mut InferenceBundle,
    preset: &SplitPreset,
) -> Result<StudyManifest, ShiftError> {
    for tag in preset.tags() {
        if bundle.manifest.meta_tag(&tag).is_none() {
            return Err(ShiftError::MissingTag {
                preset: preset.name.clone(),
                tag,
            });
        }
    }
    let target = preset.target_predicate(bundle);
    declare_tag(&mut bundle.manifest, "domain", &["source", "target"]);
    for run in bundle.runs_mut() {
        run.set_meta("domain", |r| {
            if target.matches(r) { "target" } else { "source" }.to_string()
        });
    }

    let clean = bundle
        .manifest
        .meta_tag("shift_kind")
        .is_some()
        .then(|| Predicate::eq("shift_kind", "none"));
    let study = |name: &str, kind: StudyKind, domain: &str| {
        let predicate = match &clean {
            Some(c) => Predicate::and(vec![Predicate::eq("domain", domain), c.clone()]),
            None => Predicate::eq("domain", domain),
        };
        let members = bundle.runs()[0]
            .records()
            .iter()
            .filter(|r| predicate.matches(r))
            .map(|r| r.id.clone())
            .collect();
        GeneratedStudy {
            name: name.into(),
            kind,
            parameters: [
                ("preset".to_string(), preset.name.clone().into()),
                ("family".to_string(), preset.family.clone().into()),
                ("target".to_string(), target.to_string().into()),
            ]
            .into_iter()
            .collect(),
            predicate,
            members,
        }
    };
    Ok(StudyManifest {
        studies: vec![
            study("iid", StudyKind::Iid, "source"),
            study(&preset.name, preset.kind, "target"),
        ],
    })
}
