//! `sf-lens`: batch driver for the silent-failure analytics engine.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sf_lens_service::{BUNDLE_ROOT_ENV, DEFAULT_PORT};

#[derive(Parser)]
#[command(name = "sf-lens", version, about = "Silent-failure analytics over inference bundles")]
struct Cli {
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a bundle and check every tensor, table and record.
    Validate {
        bundle: PathBuf,
    },
    /// Write a synthetic bundle.
    Synth(SynthArgs),
    /// Corrupt a directory of PNG images at several severities.
    Corrupt(CorruptArgs),
    /// Tag records source/target with a split preset and record its studies.
    Split {
        #[arg(long)]
        preset: String,
        #[arg(long, env = BUNDLE_ROOT_ENV)]
        bundle: PathBuf,
    },
    /// Score studies x channels into a metric report.
    Evaluate(EvaluateArgs),
    /// Write one risk-coverage curve as CSV.
    Curves(CurvesArgs),
    /// Fit a PCA + t-SNE embedding and cache it in the bundle.
    Embed {
        #[command(flatten)]
        frame: FrameArgs,
    },
    /// Representative records of a concept's clusters in an embedding.
    Clusters {
        #[command(flatten)]
        frame: FrameArgs,
        /// Predicate selecting the concept, e.g. `label=3`.
        #[arg(long)]
        concept: String,
    },
    /// Most confident misclassifications.
    Failures(FailuresArgs),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, env = BUNDLE_ROOT_ENV)]
        bundle_root: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// MCD samples per record.
    #[arg(long, default_value_t = 10)]
    t: usize,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Target-domain latent translation.
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Source records that get corrupted variants.
    #[arg(long, default_value_t = 0)]
    corrupted: usize,
    #[arg(long, default_value_t = 0.5)]
    target_fraction: f64,
    /// Omit the abstention head.
    #[arg(long)]
    no_dg: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    images: PathBuf,
    /// Corruption kinds; all five when omitted.
    #[arg(long, value_delimiter = ',')]
    kind: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [1u8, 2, 3, 4, 5])]
    levels: Vec<u8>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, env = BUNDLE_ROOT_ENV)]
    bundle: PathBuf,
    /// Study names; every non-empty study when omitted.
    #[arg(long, value_delimiter = ',')]
    studies: Vec<String>,
    /// Channel names; every available channel when omitted.
    #[arg(long, value_delimiter = ',')]
    channels: Vec<String>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    /// Also write TP/FP/TN/FN counts at fixed coverages.
    #[arg(long)]
    outcomes: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    #[arg(long, env = BUNDLE_ROOT_ENV)]
    bundle: PathBuf,
    #[arg(long)]
    study: String,
    #[arg(long, default_value = "msr")]
    channel: String,
    #[arg(long, default_value_t = 0)]
    run: usize,
    /// Evenly spaced coverage points; the full curve when omitted.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct FrameArgs {
    #[arg(long, env = BUNDLE_ROOT_ENV)]
    bundle: PathBuf,
    /// Predicate selecting the embedded records.
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    run: usize,
    #[arg(long)]
    perplexity: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    pca_dims: Option<usize>,
}

#[derive(Args)]
struct FailuresArgs {
    #[arg(long, env = BUNDLE_ROOT_ENV)]
    bundle: PathBuf,
    #[arg(long, default_value = "msr")]
    channel: String,
    #[arg(long, default_value_t = 20)]
    top: usize,
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    run: usize,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.source_chain() {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
