//! Silent-failure analytics for image classifiers.
//!
//! The crate ingests inference bundles (logits, Monte-Carlo-dropout stacks,
//! latent vectors and record metadata), derives confidence scores, evaluates
//! them with risk-coverage metrics on iid and shifted studies, builds shifted
//! studies from corruptions and metadata splits, and embeds latent spaces for
//! visual failure analysis.

pub mod csf;
pub mod exec;
pub mod ingest;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod shift;

pub use exec::Execution;
