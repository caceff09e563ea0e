use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the estimation and simulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("arm {arm} out of range for {arms} arms")]
    ArmOutOfRange { arm: usize, arms: usize },

    #[error("feature pool ingestion failed: {0}")]
    Ingestion(String),

    #[error("empty feature pool")]
    EmptyPool,

    #[error("degenerate noise: variance {0} is not positive")]
    DegenerateNoise(f64),

    #[error("invalid probability: {0}")]
    InvalidProbability(String),

    #[error("non-finite prediction for arm {arm}")]
    NonFinitePrediction { arm: usize },

    #[error("observation index {got} does not follow stored index {last}")]
    OutOfOrder { last: usize, got: usize },

    #[error("propensity {prob} for arm {arm} is below the floor")]
    FloorViolation { arm: usize, prob: f64 },

    #[error("outcome {0} outside [0, 1] for the logistic family")]
    LogisticOutcome(f64),

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("empty history")]
    EmptyHistory,

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint T={checkpoint}: {source}")]
    Checkpoint {
        checkpoint: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
