//! Deterministic desk-scale simulator of a market-managed mixture-of-experts
//! transformer.
//!
//! A small character-level transformer with two MoE blocks is trained under a
//! "market" layer that periodically scores every expert by cost-penalized
//! fitness, protects newborn experts with a linear grace ramp, and replaces
//! the worst expert when it falls more than one standard deviation below the
//! pool mean. The crate bundles:
//!
//! - [`numerics`]: dense f64 tensors, a reverse-mode gradient tape, Adam
//! - [`model`]: the 2-layer MoE transformer and its routing records
//! - [`market`]: per-interval expert statistics, fitness modes, replacement
//! - [`data`]: shared character vocabulary, corpora, domain-shift schedule
//! - [`experiment`]: run presets, the training loop, artifacts, analysis
//! - [`report`]: text / CSV / SVG rendering of run artifacts
//!
//! Everything is seeded and single-threaded per run: the same config and seed
//! produce byte-identical artifact files on the same platform.

pub mod data;
pub mod experiment;
pub mod market;
pub mod model;
pub mod numerics;
pub mod report;

/// Crate-wide error type.
///
/// `Config` and `Usage` map to CLI exit code 1 (validation), everything else
/// to exit code 2 (runtime failure).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than by execution.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Usage(_) | Error::Artifact(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
