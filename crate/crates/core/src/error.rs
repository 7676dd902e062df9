use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the differentiable tensor engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: unsupported rank {rank}, graph tensors are at most 2-d")]
    Rank { op: &'static str, rank: usize },
    #[error("{op}: axis {axis} out of range")]
    Axis { op: &'static str, axis: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward already ran on this graph; rebuild the forward pass first")]
    BackwardTwice,
    #[error("tensor has {len} values but shape {shape:?} needs {expected}")]
    Length {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("did not converge: {0}")]
    NonConvergence(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
