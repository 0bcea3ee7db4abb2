use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{InferenceRecord, Predicate, PSEUDO_TAGS};

/// Study family, matching the iid / corruption / acquisition / manifestation
/// column groups of a benchmark table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyKind {
    Iid,
    Cor,
    Acq,
    Man,
}

impl StudyKind {
    pub const ALL: [StudyKind; 4] = [StudyKind::Iid, StudyKind::Cor, StudyKind::Acq, StudyKind::Man];

    pub fn as_str(self) -> &'static str {
        match self {
            StudyKind::Iid => "iid",
            StudyKind::Cor => "cor",
            StudyKind::Acq => "acq",
            StudyKind::Man => "man",
        }
    }
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StudyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StudyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown study kind `{s}` (expected iid, cor, acq or man)"))
    }
}

/// A named evaluation slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDefinition {
    pub name: String,
    pub kind: StudyKind,
    pub predicate: Predicate,
}

impl StudyDefinition {
    pub fn new(name: impl Into<String>, kind: StudyKind, predicate: Predicate) -> Self {
        StudyDefinition {
            name: name.into(),
            kind,
            predicate,
        }
    }

    /// Checks that the predicate only uses declared tags (or pseudo-tags).
    /// Returns the first undeclared tag.
    pub fn undeclared_tag<'a, I>(&self, declared: I) -> Option<String>
    where
        I: IntoIterator<Item = &'a str> + Clone,
    {
        self.predicate.tags().into_iter().find(|t| {
            !PSEUDO_TAGS.contains(&t.as_str()) && !declared.clone().into_iter().any(|d| d == t)
        })
    }

    /// Indices of matching records, in record order.
    pub fn members(&self, records: &[InferenceRecord]) -> Vec<usize> {
        records
            .iter()
            .enumerate()
            .filter(|(_, r)| self.predicate.matches(r))
            .map(|(i, _)| i)
            .collect()
    }
}
