use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the modelling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("pmf truncation: horizon {horizon} days leaves {tail:.4} of the mass uncaptured (limit 0.01)")]
    Truncation { horizon: usize, tail: f64 },

    #[error("data validation failed: {0}")]
    Validation(String),

    #[error("state `{0}` never reaches the cumulative death threshold")]
    BelowThreshold(String),

    #[error("series length mismatch: {0}")]
    Misaligned(String),

    #[error("sampler: {0}")]
    Sampler(String),

    #[error("insufficient draws: {0}")]
    InsufficientDraws(String),

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

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
