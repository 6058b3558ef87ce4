use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0}")]
    InvalidShape(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("{0}: backward called without a recorded forward pass")]
    BackwardBeforeForward(&'static str),
    #[error("batchnorm: running statistics are uninitialized, run a training-mode pass or load them first")]
    UninitializedRunningStats,
    #[error("pearson correlation undefined: zero variance in {0}")]
    UndefinedCorrelation(&'static str),
    #[error("unknown variant label `{0}` (expected one of A, B, C, D)")]
    UnknownVariant(String),
    #[error("{path}: row {row}: {msg}")]
    DataRow {
        path: PathBuf,
        row: usize,
        msg: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    FileIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("precision mismatch: file holds {found:?}, caller requested {expected:?}")]
    PrecisionMismatch {
        found: crate::Precision,
        expected: crate::Precision,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::DataRow { .. }
            | Error::Data(_)
            | Error::FileIo { .. }
            | Error::Io(_) => ErrorClass::Data,
            Error::NonFiniteLoss { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Config,
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::FileIo {
            path: path.into(),
            source,
        }
    }
}
