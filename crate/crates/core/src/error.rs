use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward: root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward: graph was built with taping disabled")]
    TapingDisabled,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{op}: no valid landmarks")]
    NoValidLandmarks { op: &'static str },

    #[error("subject leakage: {subject} appears in both {a} and {b}")]
    Leakage {
        subject: String,
        a: &'static str,
        b: &'static str,
    },

    #[error("{}:{line}: {field}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        reason: String,
    },

    #[error("{}: {reason}", path.display())]
    Validation { path: PathBuf, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
