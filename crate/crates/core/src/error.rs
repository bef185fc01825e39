use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the ageing-model pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("value {value} outside range [{lo}, {hi}]")]
    Range { value: f64, lo: f64, hi: f64 },

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("cell {0} never declines after its capacity maximum")]
    EmptyAfterRebase(String),

    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("factorization failed after jitter levels {attempted:?}")]
    Numerical { attempted: Vec<f64> },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("undefined relevance: both stress inputs have zero span in the training data")]
    UndefinedRelevance,

    #[error("model file error: {0}")]
    ModelFile(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
