use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by kernels, model assembly, weight I/O and reporting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    Geometry { op: &'static str, reason: String },

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("model state: {0}")]
    State(String),

    #[error("{path}: not an SBCW container ({reason})")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: corrupt container ({reason})")]
    Corrupt { path: PathBuf, reason: String },

    #[error("{path}: unsupported container version {found} (this build reads version {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("weights do not match the model: {0}")]
    Binding(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn geometry(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Geometry {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
