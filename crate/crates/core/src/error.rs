use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the estimation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("singular system: diagonal of column {column} is {value:e} (tolerance {tolerance:e})")]
    Singular {
        column: usize,
        value: f64,
        tolerance: f64,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("matrix is not symmetric positive definite ({context})")]
    NotPositiveDefinite { context: &'static str },

    #[error("unknown variable {0}")]
    MissingVariable(String),

    #[error("duplicate variable {0}")]
    DuplicateVariable(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("Gauss-Newton diverged after {iterations} iterations (cost {cost:e})")]
    Diverged { iterations: usize, cost: f64 },

    #[error("not enough points for mixture fit: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("empty mixture model")]
    EmptyModel,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("unobservable geometry: {0}")]
    Unobservable(String),

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
