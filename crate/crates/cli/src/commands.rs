use std::error::Error;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;

use sf_lens_core::csf::{available_channels, compute_channel, ChannelName};
use sf_lens_core::ingest::{generate_synthetic_bundle, load_bundle, write_bundle, write_metadata_tables, SyntheticSpec};
use sf_lens_core::latent::{
    concept_clusters, embed, mine_silent_failures, scope_members, EmbeddingFrame, EmbeddingParams, EMBEDDINGS_DIR,
};
use sf_lens_core::metrics::{
    aurc, detection_counts, evaluate, rc_curve, OutcomeRow, StudyData, DEFAULT_OUTCOME_COVERAGES,
};
use sf_lens_core::model::{Predicate, StudyDefinition};
use sf_lens_core::shift::{
    apply_split, bundle_studies, corrupt_directory, find_preset, CorruptionKind, StudyManifest, STUDIES_FILE,
};
use sf_lens_core::Execution;
use sf_lens_service::{serve, AppState};

use crate::{Cli, Command, CorruptArgs, CurvesArgs, EvaluateArgs, FailuresArgs, FrameArgs, SynthArgs};

/// A failed command. Usage errors exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(Box<dyn Error>),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Failed(e) => e.fmt(f),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }

    pub fn source_chain(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let CliError::Failed(e) = self {
            let mut s = e.source();
            while let Some(cur) = s {
                out.push(cur.to_string());
                s = cur.source();
            }
        }
        out
    }
}

impl<E: Error + 'static> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Failed(Box::new(e))
    }
}

type Result<T = ()> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn predicate(text: &str) -> Result<Predicate> {
    text.parse().map_err(|e| usage(format!("bad predicate `{text}`: {e}")))
}

fn channel(text: &str) -> Result<ChannelName> {
    text.parse().map_err(|e| usage(format!("{e}")))
}

/// `path` when given, stdout otherwise.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(io::BufWriter::new(fs::File::create(p)?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

pub fn run(cli: Cli) -> Result {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Validate { bundle } => validate(&bundle),
        Command::Synth(a) => synth(a),
        Command::Corrupt(a) => corrupt(a, exec),
        Command::Split { preset, bundle } => split(&preset, &bundle),
        Command::Evaluate(a) => evaluate_cmd(a, exec),
        Command::Curves(a) => curves(a, exec),
        Command::Embed { frame } => {
            let (key, frame) = load_or_embed(&frame, exec)?;
            println!("{key}\t{} records\tKL {:.4}", frame.ids.len(), frame.kl_trace.last().map_or(f64::NAN, |k| k.1));
            Ok(())
        }
        Command::Clusters { frame, concept } => clusters(&frame, &concept, exec),
        Command::Failures(a) => failures(a, exec),
        Command::Serve {
            port,
            bundle_root,
            host,
        } => {
            let state = AppState::load(&bundle_root)?.with_execution(exec);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(Arc::new(state), (host, port).into()))?;
            Ok(())
        }
    }
}

fn validate(root: &Path) -> Result {
    let b = load_bundle(root)?;
    let m = &b.manifest;
    println!(
        "ok: {} ({} runs x {} records, k={}, t={}, d={}, channels: {})",
        m.name,
        m.runs,
        m.n,
        m.k,
        m.t,
        m.d,
        available_channels(&b.runs()[0])
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result {
    let spec = SyntheticSpec {
        n: a.n,
        k: a.k,
        d: a.d,
        t: a.t,
        class_separation: a.separation,
        shift_offset: a.offset,
        seed: a.seed,
        runs: a.runs,
        target_fraction: a.target_fraction,
        corrupted: a.corrupted,
        dg: !a.no_dg,
    };
    let bundle = generate_synthetic_bundle(&spec)?;
    write_bundle(&bundle, &a.out)?;
    println!("wrote {} ({} records per run) to {}", bundle.manifest.name, bundle.manifest.n, a.out.display());
    Ok(())
}

fn corrupt(a: CorruptArgs, exec: Execution) -> Result {
    let kinds: Vec<CorruptionKind> = if a.kind.is_empty() {
        CorruptionKind::ALL.to_vec()
    } else {
        a.kind
            .iter()
            .map(|k| k.parse().map_err(|e| usage(format!("{e}"))))
            .collect::<Result<_>>()?
    };
    if let Some(l) = a.levels.iter().find(|l| !(1..=5).contains(*l)) {
        return Err(usage(format!("level {l} outside 1..=5")));
    }
    let (written, studies) = corrupt_directory(&a.images, &kinds, &a.levels, a.seed, &a.out, exec)?;
    studies.save(&a.out.join(STUDIES_FILE))?;
    println!("wrote {} images and {} studies to {}", written.len(), studies.studies.len(), a.out.display());
    Ok(())
}

fn split(preset: &str, root: &Path) -> Result {
    let preset = find_preset(preset).map_err(|e| usage(e.to_string()))?;
    let mut bundle = load_bundle(root)?;
    let generated = apply_split(&mut bundle, &preset)?;
    write_metadata_tables(&bundle, root)?;
    let path = root.join(STUDIES_FILE);
    let mut stored = if path.exists() {
        StudyManifest::load(&path)?
    } else {
        StudyManifest::default()
    };
    for s in generated.studies {
        println!("{}\t{}\t{} members", s.name, s.kind, s.members.len());
        match stored.studies.iter_mut().find(|x| x.name == s.name) {
            Some(slot) => *slot = s,
            None => stored.studies.push(s),
        }
    }
    stored.save(&path)?;
    Ok(())
}

fn select_studies(all: Vec<StudyDefinition>, names: &[String], records: &[sf_lens_core::model::InferenceRecord]) -> Result<Vec<StudyDefinition>> {
    if names.is_empty() {
        return Ok(all.into_iter().filter(|s| !s.members(records).is_empty()).collect());
    }
    names
        .iter()
        .map(|n| {
            all.iter()
                .find(|s| &s.name == n)
                .cloned()
                .ok_or_else(|| usage(format!("unknown study `{n}` (known: {})", all.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", "))))
        })
        .collect()
}

fn evaluate_cmd(a: EvaluateArgs, exec: Execution) -> Result {
    let bundle = load_bundle(&a.bundle)?;
    let first = &bundle.runs()[0];
    let studies = select_studies(bundle_studies(&bundle)?, &a.studies, first.records())?;
    let channels: Vec<ChannelName> = if a.channels.is_empty() {
        available_channels(first)
    } else {
        a.channels.iter().map(|c| channel(c)).collect::<Result<_>>()?
    };
    let report = evaluate(&bundle, &studies, &channels, exec)?;
    let mut out = sink(a.out.as_deref())?;
    if a.json {
        writeln!(out, "{}", report.to_json_string())?;
    } else {
        report.write_csv(&mut out)?;
    }
    out.flush()?;

    if let Some(path) = &a.outcomes {
        let rows = detection_counts(&bundle, &studies, &channels, &DEFAULT_OUTCOME_COVERAGES, exec)?;
        let mut out = sink(Some(path))?;
        if a.json {
            writeln!(out, "{}", serde_json::to_string_pretty(&rows)?)?;
        } else {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(OutcomeRow::COLUMNS)?;
            for r in &rows {
                w.write_record(r.csv_record())?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn curves(a: CurvesArgs, exec: Execution) -> Result {
    let bundle = load_bundle(&a.bundle)?;
    let run = bundle
        .run(a.run)
        .ok_or_else(|| usage(format!("run {} out of range ({} runs)", a.run, bundle.runs().len())))?;
    let studies = select_studies(bundle_studies(&bundle)?, std::slice::from_ref(&a.study), run.records())?;
    let scores = compute_channel(run, &channel(&a.channel)?, exec)?.scores;
    let data = StudyData::collect(run, &studies[0].predicate, &scores);
    let curve = rc_curve(&data.residuals, &data.confidences, &data.ids)?;
    let points = match a.points {
        Some(0) => return Err(usage("--points must be positive")),
        Some(m) => curve.thinned(m),
        None => curve.coverage.iter().copied().zip(curve.risk.iter().copied()).collect(),
    };
    let mut w = csv::Writer::from_writer(sink(a.out.as_deref())?);
    w.write_record(["coverage", "risk"])?;
    for (c, r) in points {
        w.write_record([c.to_string(), r.to_string()])?;
    }
    w.flush()?;
    eprintln!("{} / {}: AURC {:.4} over {} records", a.study, a.channel, aurc(&curve), curve.len());
    Ok(())
}

fn frame_params(a: &FrameArgs) -> Result<EmbeddingParams> {
    let mut params = EmbeddingParams {
        scope: predicate(&a.scope)?,
        run: a.run,
        ..Default::default()
    };
    params.tsne.seed = a.seed;
    if let Some(p) = a.perplexity {
        params.tsne.perplexity = p;
    }
    if let Some(i) = a.iterations {
        params.tsne.iterations = i;
    }
    if let Some(d) = a.pca_dims {
        params.pca_dims = d;
    }
    Ok(params)
}

/// The cached frame for these parameters, fitting and caching it if absent.
fn load_or_embed(a: &FrameArgs, exec: Execution) -> Result<(String, EmbeddingFrame)> {
    let bundle = load_bundle(&a.bundle)?;
    let params = frame_params(a)?;
    let dir = a.bundle.join(EMBEDDINGS_DIR);
    let key = EmbeddingFrame::key_for(&bundle, &params);
    if let Ok(frame) = EmbeddingFrame::load(&dir, &key) {
        return Ok((key, frame));
    }
    let frame = embed(&bundle, &params, exec)?;
    frame.save(&dir)?;
    Ok((key, frame))
}

fn clusters(a: &FrameArgs, concept: &str, exec: Execution) -> Result {
    let pred = predicate(concept)?;
    let (_, frame) = load_or_embed(a, exec)?;
    let bundle = load_bundle(&a.bundle)?;
    let run = &bundle.runs()[frame.params.run];
    let cluster = concept_clusters(&frame, run, concept, &pred, a.seed, exec)?;
    println!("{}", serde_json::to_string_pretty(&cluster)?);
    Ok(())
}

fn failures(a: FailuresArgs, exec: Execution) -> Result {
    let bundle = load_bundle(&a.bundle)?;
    let run = bundle
        .run(a.run)
        .ok_or_else(|| usage(format!("run {} out of range ({} runs)", a.run, bundle.runs().len())))?;
    let scores = compute_channel(run, &channel(&a.channel)?, exec)?.scores;
    let scope = scope_members(run, &predicate(&a.scope)?);
    let found = mine_silent_failures(run, &scope, &scores, a.top);
    let out = sink(None)?;
    if a.json {
        let mut out = out;
        writeln!(out, "{}", serde_json::to_string_pretty(&found)?)?;
        return Ok(());
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "confidence", "prediction", "label", "image_ref"])?;
    for f in &found {
        w.write_record([
            f.id.clone(),
            f.confidence.to_string(),
            f.prediction.to_string(),
            f.label.to_string(),
            f.image_ref.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
