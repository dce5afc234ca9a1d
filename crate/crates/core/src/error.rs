use std::path::PathBuf;

use thiserror::Error;

/// Shape and contract failures raised by tensor kernels and the tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("matmul dimension mismatch: {lhs:?} x {rhs:?}")]
    MatmulShape { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shapes {lhs:?} and {rhs:?} are not compatible")]
    Broadcast { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("cannot concatenate shapes {shapes:?}")]
    Concat { shapes: Vec<Vec<usize>> },
    #[error("slice {start}..{end} out of range for extent {extent}")]
    Slice {
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

/// Errors from the model, training and analysis layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("phase-2 forward needs the cached shared-prompt features for this input")]
    CacheMiss,
    #[error("classes without training samples: {0:?}")]
    MissingClasses(Vec<usize>),
    #[error("numerical failure: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Dependency(String),
    #[error("backbone digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status for this error: 2 for configuration problems,
    /// 3 for missing or mismatched inputs, 4 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingClasses(_) | Error::Tensor(_) => 2,
            Error::Dependency(_)
            | Error::DigestMismatch { .. }
            | Error::Corrupt { .. }
            | Error::Io { .. }
            | Error::CacheMiss => 3,
            Error::NonFinite(_) | Error::Degenerate(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
