//! Boolean predicates over record metadata.
//!
//! Text form (used on the command line and in query strings) is a disjunction
//! of conjunctions:
//!
//! ```text
//! domain=target && site in {MSKCC,HCB} || spiculation>2
//! ```
//!
//! Terms: `tag=value`, `tag!=value`, `tag in {a,b}`, `tag>x`, `tag<x`, and the
//! literal `all`. `&&` binds tighter than `||`; there are no parentheses.
//! The pseudo-tags `label` and `id` refer to the record's class index and id.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::InferenceRecord;

/// Pseudo-tags resolvable on every record without a metadata column.
pub const PSEUDO_TAGS: [&str; 2] = ["label", "id"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Predicate {
    All,
    Eq { tag: String, value: String },
    Ne { tag: String, value: String },
    In { tag: String, values: Vec<String> },
    Gt { tag: String, value: f64 },
    Lt { tag: String, value: f64 },
    And { terms: Vec<Predicate> },
    Or { terms: Vec<Predicate> },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid predicate `{input}`: {reason}")]
pub struct PredicateParseError {
    pub input: String,
    pub reason: String,
}

impl Predicate {
    pub fn eq(tag: impl Into<String>, value: impl Into<String>) -> Self {
        Predicate::Eq {
            tag: tag.into(),
            value: value.into(),
        }
    }

    pub fn one_of<I, S>(tag: impl Into<String>, values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Predicate::In {
            tag: tag.into(),
            values: values.into_iter().map(Into::into).collect(),
        }
    }

    pub fn and(terms: Vec<Predicate>) -> Self {
        Predicate::And { terms }
    }

    pub fn or(terms: Vec<Predicate>) -> Self {
        Predicate::Or { terms }
    }

    /// Evaluates the predicate against a record. A missing tag never matches.
    pub fn matches(&self, record: &InferenceRecord) -> bool {
        let lookup = |tag: &str| -> Option<String> {
            match tag {
                "label" => Some(record.label.to_string()),
                "id" => Some(record.id.clone()),
                _ => record.meta.get(tag).cloned(),
            }
        };
        match self {
            Predicate::All => true,
            Predicate::Eq { tag, value } => lookup(tag).is_some_and(|v| &v == value),
            Predicate::Ne { tag, value } => lookup(tag).is_some_and(|v| &v != value),
            Predicate::In { tag, values } => lookup(tag).is_some_and(|v| values.contains(&v)),
            Predicate::Gt { tag, value } => numeric(lookup(tag)).is_some_and(|v| v > *value),
            Predicate::Lt { tag, value } => numeric(lookup(tag)).is_some_and(|v| v < *value),
            Predicate::And { terms } => terms.iter().all(|t| t.matches(record)),
            Predicate::Or { terms } => terms.iter().any(|t| t.matches(record)),
        }
    }

    /// All tag names referenced anywhere in the predicate.
    pub fn tags(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_tags(&mut out);
        out
    }

    fn collect_tags(&self, out: &mut BTreeSet<String>) {
        match self {
            Predicate::All => {}
            Predicate::Eq { tag, .. }
            | Predicate::Ne { tag, .. }
            | Predicate::In { tag, .. }
            | Predicate::Gt { tag, .. }
            | Predicate::Lt { tag, .. } => {
                out.insert(tag.clone());
            }
            Predicate::And { terms } | Predicate::Or { terms } => {
                terms.iter().for_each(|t| t.collect_tags(out))
            }
        }
    }
}

fn numeric(v: Option<String>) -> Option<f64> {
    v.and_then(|s| s.trim().parse::<f64>().ok())
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::All => write!(f, "all"),
            Predicate::Eq { tag, value } => write!(f, "{tag}={value}"),
            Predicate::Ne { tag, value } => write!(f, "{tag}!={value}"),
            Predicate::In { tag, values } => write!(f, "{tag} in {{{}}}", values.join(",")),
            Predicate::Gt { tag, value } => write!(f, "{tag}>{value}"),
            Predicate::Lt { tag, value } => write!(f, "{tag}<{value}"),
            Predicate::And { terms } => {
                let parts: Vec<String> = terms.iter().map(|t| t.to_string()).collect();
                write!(f, "{}", parts.join(" && "))
            }
            Predicate::Or { terms } => {
                let parts: Vec<String> = terms.iter().map(|t| t.to_string()).collect();
                write!(f, "{}", parts.join(" || "))
            }
        }
    }
}

impl FromStr for Predicate {
    type Err = PredicateParseError;

    fn from_str(input: &str) -> Result<Self, Self::Err> {
        let err = |reason: &str| PredicateParseError {
            input: input.to_string(),
            reason: reason.to_string(),
        };
        let mut disjuncts = Vec::new();
        for clause in input.split("||") {
            let mut conjuncts = Vec::new();
            for term in clause.split("&&") {
                conjuncts.push(parse_term(term.trim()).map_err(|r| err(&r))?);
            }
            disjuncts.push(if conjuncts.len() == 1 {
                conjuncts.pop().unwrap()
            } else {
                Predicate::And { terms: conjuncts }
            });
        }
        Ok(if disjuncts.len() == 1 {
            disjuncts.pop().unwrap()
        } else {
            Predicate::Or { terms: disjuncts }
        })
    }
}

fn parse_term(term: &str) -> Result<Predicate, String> {
    if term.is_empty() {
        return Err("empty term".into());
    }
    if term == "all" {
        return Ok(Predicate::All);
    }
    let valid_tag = |t: &str| {
        !t.is_empty()
            && t
                .chars()
                .all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | '.'))
    };
    if let Some((tag, rest)) = term.split_once(" in ") {
        let tag = tag.trim();
        let rest = rest.trim();
        if !valid_tag(tag) {
            return Err(format!("bad tag name `{tag}`"));
        }
        let inner = rest
            .strip_prefix('{')
            .and_then(|r| r.strip_suffix('}'))
            .ok_or_else(|| "set must be written as {a,b,...}".to_string())?;
        let values: Vec<String> = inner
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        return Ok(Predicate::In {
            tag: tag.to_string(),
            values,
        });
    }
    // `!=` must be tried before `=`.
    for (op, ctor) in [
        ("!=", 0u8),
        ("=", 1),
        (">", 2),
        ("<", 3),
    ] {
        if let Some((tag, value)) = term.split_once(op) {
            let tag = tag.trim();
            let value = value.trim();
            if !valid_tag(tag) {
                return Err(format!("bad tag name `{tag}`"));
            }
            return match ctor {
                0 => Ok(Predicate::Ne {
                    tag: tag.into(),
                    value: value.into(),
                }),
                1 => Ok(Predicate::Eq {
                    tag: tag.into(),
                    value: value.into(),
                }),
                _ => {
                    let x: f64 = value
                        .parse()
                        .map_err(|_| format!("`{value}` is not a number"))?;
                    Ok(if ctor == 2 {
                        Predicate::Gt { tag: tag.into(), value: x }
                    } else {
                        Predicate::Lt { tag: tag.into(), value: x }
                    })
                }
            };
        }
    }
    Err(format!("cannot parse term `{term}`"))
}
