use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },

    #[error("{op}: empty axis set")]
    EmptyAxes { op: &'static str },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for {param} at flat index {index}")]
    NonFiniteGradient { param: String, index: usize },

    #[error("backward requires a loss of shape [1], got {0:?}")]
    NotScalar(Vec<usize>),

    #[error("graph was already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape { op, detail: detail.into() })
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
