//! Study x channel x run evaluation and its CSV / JSON export.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use serde::{Serialize, Serializer};

use super::{accuracy, aurc, eaurc, failure_auroc, rc_curve, MetricsError};
use crate::csf::{compute_channel, ChannelName};
use crate::exec::Execution;
use crate::ingest::{InferenceBundle, Run};
use crate::model::{residual, threshold_at_coverage, OutcomeCounts, Predicate, StudyDefinition, StudyKind};

/// Coverages at which `detection_counts` places its thresholds.
pub const DEFAULT_OUTCOME_COVERAGES: [f64; 5] = [0.5, 0.8, 0.9, 0.95, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RunId {
    Index(usize),
    Mean,
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunId::Index(i) => write!(f, "{i}"),
            RunId::Mean => f.write_str("mean"),
        }
    }
}

impl Serialize for RunId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub study: String,
    pub kind: StudyKind,
    pub channel: ChannelName,
    pub run: RunId,
    /// Percent, in `[0, 100]`.
    pub aurc: f64,
    pub eaurc: f64,
    /// `None` when the study lacks either correct or incorrect records.
    pub f_auroc: Option<f64>,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "study", "kind", "channel", "run", "aurc", "eaurc", "f_auroc", "accuracy",
];

impl MetricReport {
    pub fn find(&self, study: &str, channel: &ChannelName, run: RunId) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.study == study && &r.channel == channel && r.run == run)
    }

    pub fn filtered(&self, study: Option<&str>, channel: Option<&ChannelName>) -> MetricReport {
        MetricReport {
            rows: self
                .rows
                .iter()
                .filter(|r| study.is_none_or(|s| r.study == s))
                .filter(|r| channel.is_none_or(|c| &r.channel == c))
                .cloned()
                .collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.study.clone(),
                r.kind.to_string(),
                r.channel.to_string(),
                r.run.to_string(),
                r.aurc.to_string(),
                r.eaurc.to_string(),
                r.f_auroc.map(|v| v.to_string()).unwrap_or_default(),
                r.accuracy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Residuals, confidences and ids of one study slice of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyData {
    pub indices: Vec<usize>,
    pub residuals: Vec<u8>,
    pub confidences: Vec<f64>,
    pub ids: Vec<String>,
}

impl StudyData {
    pub fn collect(run: &Run, predicate: &Predicate, scores: &[f64]) -> StudyData {
        let mut data = StudyData::select(run, predicate);
        data.confidences = data.indices.iter().map(|&i| scores[i]).collect();
        data
    }

    /// Membership, residuals and ids only; `confidences` is left empty.
    pub fn select(run: &Run, predicate: &Predicate) -> StudyData {
        let records = run.records();
        let indices: Vec<usize> = (0..records.len())
            .filter(|&i| predicate.matches(&records[i]))
            .collect();
        StudyData {
            residuals: indices.iter().map(|&i| residual(&records[i])).collect(),
            confidences: Vec::new(),
            ids: indices.iter().map(|&i| records[i].id.clone()).collect(),
            indices,
        }
    }
}

/// Studies derivable from the conventional tags `domain`, `shift_kind` and
/// `intensity`: an iid study on clean source records, one corruption study
/// per (kind, level) present, and a `target` study when target records exist.
pub fn default_studies(bundle: &InferenceBundle) -> Vec<StudyDefinition> {
    let m = &bundle.manifest;
    let has = |t: &str| m.meta_tag(t).is_some();
    let clean = has("shift_kind").then(|| Predicate::eq("shift_kind", "none"));
    let with_clean = |p: Predicate| match &clean {
        Some(c) => Predicate::and(vec![p, c.clone()]),
        None => p,
    };
    let mut out = Vec::new();
    let iid = if has("domain") {
        with_clean(Predicate::eq("domain", "source"))
    } else {
        clean.clone().unwrap_or(Predicate::All)
    };
    out.push(StudyDefinition::new("iid", StudyKind::Iid, iid));

    let Some(run) = bundle.runs().first() else {
        return out;
    };
    if has("shift_kind") && has("intensity") {
        let combos: BTreeSet<(String, u32, String)> = run
            .records()
            .iter()
            .filter_map(|r| {
                let kind = r.meta.get("shift_kind")?;
                let level = r.meta.get("intensity")?;
                (kind != "none" && !kind.is_empty())
                    .then(|| (kind.clone(), level.parse().unwrap_or(u32::MAX), level.clone()))
            })
            .collect();
        for (kind, _, level) in combos {
            out.push(StudyDefinition::new(
                format!("cor:{kind}:{level}"),
                StudyKind::Cor,
                Predicate::and(vec![
                    Predicate::eq("shift_kind", kind.as_str()),
                    Predicate::eq("intensity", level.as_str()),
                ]),
            ));
        }
    }
    if has("domain") {
        let target = StudyDefinition::new(
            "target",
            StudyKind::Acq,
            with_clean(Predicate::eq("domain", "target")),
        );
        if !target.members(run.records()).is_empty() {
            out.push(target);
        }
    }
    out.retain(|s| !s.members(run.records()).is_empty());
    out
}

struct Prepared {
    /// `[run][channel]` scores over all records.
    scores: Vec<Vec<Vec<f64>>>,
    /// `[run][study]` slices, confidences left empty.
    slices: Vec<Vec<StudyData>>,
}

fn prepare(
    bundle: &InferenceBundle,
    studies: &[StudyDefinition],
    channels: &[ChannelName],
    exec: Execution,
) -> Result<Prepared, MetricsError> {
    let mut scores = Vec::with_capacity(bundle.runs().len());
    let mut slices = Vec::with_capacity(bundle.runs().len());
    for run in bundle.runs() {
        let per_channel = channels
            .iter()
            .map(|c| compute_channel(run, c, exec).map(|ch| ch.scores))
            .collect::<Result<Vec<_>, _>>()?;
        let per_study = studies
            .iter()
            .map(|s| {
                let data = StudyData::select(run, &s.predicate);
                if data.indices.is_empty() {
                    Err(MetricsError::EmptyStudy(s.name.clone()))
                } else {
                    Ok(data)
                }
            })
            .collect::<Result<Vec<_>, _>>();
        scores.push(per_channel);
        slices.push(per_study?);
    }
    Ok(Prepared { scores, slices })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    sum / count as f64
}

fn mean_opt<'a>(values: impl Iterator<Item = &'a Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().copied().collect();
    (!present.is_empty()).then(|| mean(present.into_iter()))
}

fn aggregate(study: String, kind: StudyKind, channel: ChannelName, run: RunId, rows: &[&MetricRow]) -> MetricRow {
    MetricRow {
        study,
        kind,
        channel,
        run,
        aurc: mean(rows.iter().map(|r| r.aurc)),
        eaurc: mean(rows.iter().map(|r| r.eaurc)),
        f_auroc: mean_opt(rows.iter().map(|r| &r.f_auroc)),
        accuracy: mean(rows.iter().map(|r| r.accuracy)),
        n: rows.iter().map(|r| r.n).sum(),
    }
}

/// Scores every (study, channel, run) triple, then appends run means and
/// unweighted family means (`family:cor`, `family:acq`, `family:man`).
pub fn evaluate(
    bundle: &InferenceBundle,
    studies: &[StudyDefinition],
    channels: &[ChannelName],
    exec: Execution,
) -> Result<MetricReport, MetricsError> {
    let prep = prepare(bundle, studies, channels, exec)?;
    let runs = bundle.runs().len();
    let triples: Vec<(usize, usize, usize)> = (0..studies.len())
        .flat_map(|s| (0..channels.len()).flat_map(move |c| (0..runs).map(move |r| (s, c, r))))
        .collect();

    let rows = exec.map_slice(&triples, |&(s, c, r)| {
        let slice = &prep.slices[r][s];
        let scores = &prep.scores[r][c];
        let conf: Vec<f64> = slice.indices.iter().map(|&i| scores[i]).collect();
        let curve = rc_curve(&slice.residuals, &conf, &slice.ids)?;
        Ok(MetricRow {
            study: studies[s].name.clone(),
            kind: studies[s].kind,
            channel: channels[c].clone(),
            run: RunId::Index(r),
            aurc: aurc(&curve),
            eaurc: eaurc(&curve),
            f_auroc: failure_auroc(&slice.residuals, &conf).ok(),
            accuracy: accuracy(&slice.residuals),
            n: slice.indices.len(),
        })
    });
    let per_run: Vec<MetricRow> = rows.into_iter().collect::<Result<_, MetricsError>>()?;

    let mut out = Vec::with_capacity(per_run.len() + studies.len() * channels.len() * 2);
    for (s, study) in studies.iter().enumerate() {
        for c in 0..channels.len() {
            let base = (s * channels.len() + c) * runs;
            let group: Vec<&MetricRow> = per_run[base..base + runs].iter().collect();
            out.extend(group.iter().map(|r| (*r).clone()));
            out.push(aggregate(
                study.name.clone(),
                study.kind,
                channels[c].clone(),
                RunId::Mean,
                &group,
            ));
        }
    }

    let mut families = Vec::new();
    for kind in [StudyKind::Cor, StudyKind::Acq, StudyKind::Man] {
        let members: BTreeSet<&str> = studies
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.name.as_str())
            .collect();
        if members.is_empty() {
            continue;
        }
        for channel in channels {
            let run_ids = (0..runs).map(RunId::Index).chain(std::iter::once(RunId::Mean));
            for run in run_ids {
                let group: Vec<&MetricRow> = out
                    .iter()
                    .filter(|r| {
                        members.contains(r.study.as_str()) && &r.channel == channel && r.run == run
                    })
                    .collect();
                families.push(aggregate(
                    format!("family:{kind}"),
                    kind,
                    channel.clone(),
                    run,
                    &group,
                ));
            }
        }
    }
    out.extend(families);
    Ok(MetricReport { rows: out })
}

/// Detection-outcome counts at thresholds placed at fixed coverages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeRow {
    pub study: String,
    pub channel: ChannelName,
    pub run: usize,
    pub coverage: f64,
    pub tau: f64,
    pub n: usize,
    #[serde(flatten)]
    pub counts: OutcomeCounts,
}

impl OutcomeRow {
    pub const COLUMNS: [&'static str; 10] = [
        "study", "channel", "run", "coverage", "tau", "n", "tp", "fp", "tn", "fn",
    ];

    pub fn csv_record(&self) -> [String; 10] {
        [
            self.study.clone(),
            self.channel.to_string(),
            self.run.to_string(),
            self.coverage.to_string(),
            self.tau.to_string(),
            self.n.to_string(),
            self.counts.tp.to_string(),
            self.counts.fp.to_string(),
            self.counts.tn.to_string(),
            self.counts.fn_.to_string(),
        ]
    }
}

pub fn detection_counts(
    bundle: &InferenceBundle,
    studies: &[StudyDefinition],
    channels: &[ChannelName],
    coverages: &[f64],
    exec: Execution,
) -> Result<Vec<OutcomeRow>, MetricsError> {
    let prep = prepare(bundle, studies, channels, exec)?;
    let mut out = Vec::new();
    for (r, run_slices) in prep.slices.iter().enumerate() {
        for (s, slice) in run_slices.iter().enumerate() {
            for (c, channel) in channels.iter().enumerate() {
                let conf: Vec<f64> = slice.indices.iter().map(|&i| prep.scores[r][c][i]).collect();
                for &coverage in coverages {
                    let Some(tau) = threshold_at_coverage(&conf, coverage) else {
                        continue;
                    };
                    out.push(OutcomeRow {
                        study: studies[s].name.clone(),
                        channel: channel.clone(),
                        run: r,
                        coverage,
                        tau,
                        n: conf.len(),
                        counts: OutcomeCounts::tally(&slice.residuals, &conf, tau),
                    });
                }
            }
        }
    }
    Ok(out)
}
