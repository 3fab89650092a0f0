use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} is too close to 1 (limit {limit})")]
    TimeNearOne { t: f64, limit: f64 },

    #[error("objective {objective}: {message}")]
    Objective {
        objective: &'static str,
        message: String,
    },

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("query point coincides with pool point {index} (zero neighbor radius)")]
    DuplicatePoint { index: usize },

    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    #[error("all LLDE scales rejected: {}", .0.join("; "))]
    AllScalesRejected(Vec<String>),

    #[error("training failed: {0}")]
    Training(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("sampling trial {trial} (seed {seed}): {source}")]
    Trial {
        seed: u64,
        trial: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
