//! Crate-wide error type.

use std::path::PathBuf;

use crate::train::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classes used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Estimation,
    Training,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error in {context}: {message}")]
    Numeric { context: String, message: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("format error in header field `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("data error: non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("estimation failed: {message}")]
    Estimation { message: String, curve: Vec<f64> },

    #[error("training aborted at step {step}: {message}")]
    TrainingAbort {
        step: usize,
        message: String,
        recent: Vec<LossBreakdown>,
    },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::NonFinite { .. } | Error::Json(_) => {
                ErrorClass::Io
            }
            Error::Estimation { .. } => ErrorClass::Estimation,
            Error::TrainingAbort { .. } | Error::Numeric { .. } | Error::Invariant(_) => {
                ErrorClass::Training
            }
            Error::Shape { .. }
            | Error::Usage(_)
            | Error::Config(_)
            | Error::Spec(_)
            | Error::InsufficientData(_) => ErrorClass::Config,
        }
    }
}
