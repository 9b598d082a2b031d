use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("singular matrix in {0} (pivot below 1e-12 relative to its norm)")]
    Singular(&'static str),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("density ratio overflow: {0}; enable the log-ratio shift")]
    Overflow(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("missing capability: {0}")]
    MissingCapability(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error at row {row}, column {column}: {message}")]
    Data {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("step {step} failed: {source}\nlast good state: {last_good}")]
    Step {
        step: usize,
        last_good: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures caused by the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Singular(_)
            | Error::NotPositiveDefinite(_)
            | Error::NonFinite { .. }
            | Error::Overflow(_)
            | Error::Domain(_) => true,
            Error::Step { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
