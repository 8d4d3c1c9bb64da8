use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("offset {index} yields a degenerate box (w = {w}, h = {h})")]
    DegenerateOffset { index: usize, w: f64, h: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("extras arity mismatch: expected {expected}, found {found} ({context})")]
    ArityMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("validation failed at {location}: {message}")]
    Validation { location: String, message: String },

    #[error("infeasible simulator configuration: {0}")]
    InfeasibleConfig(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status: 1 usage, 2 data validation, 3 invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::InfeasibleConfig(_) => 1,
            Error::Invariant(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn validation(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
