use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// A precondition on an argument was violated (empty input, bad size, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor/grid dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A value fell outside its contractual range.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// A weight file failed validation (magic, version, shape table, truncation).
    #[error("corrupt weights: {0}")]
    CorruptWeights(String),

    /// A waveform file could not be decoded under the supported formats.
    #[error("wav decode error: {0}")]
    WavDecode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
