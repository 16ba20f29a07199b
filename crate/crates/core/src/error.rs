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
    InvalidOperand { op: &'static str, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("window [{start}, {end}) out of range for stream of {len} frames")]
    WindowOutOfRange { start: i64, end: i64, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("unsupported version {found:?} (expected {expected:?})")]
    UnsupportedVersion {
        found: String,
        expected: &'static str,
    },

    #[error("length mismatch: header declares {expected} bytes of payload, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("count mismatch: header declares {expected} values, payload holds {found}")]
    CountMismatch { expected: usize, found: usize },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("length mismatch: {0} vs {1}")]
    SeriesLength(usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
