use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GpError>;

#[derive(Debug, Error)]
pub enum GpError {
    /// Invalid argument: dimension mismatch, out-of-range value, bad label.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A factorization or evaluation failed even after jitter escalation.
    #[error("numerical error: {message} (condition estimate {condition:.3e})")]
    Numerical { message: String, condition: f64 },

    /// The cached continual prior no longer matches the model inputs.
    #[error("continual prior cache is stale: {0}")]
    StaleCache(String),

    #[error("ingestion error at row {row}, column {column}: {message}")]
    Ingestion {
        row: usize,
        column: String,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GpError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        GpError::Parameter(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>, condition: f64) -> Self {
        GpError::Numerical {
            message: msg.into(),
            condition,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GpError::Io {
            path: path.into(),
            source,
        }
    }
}
