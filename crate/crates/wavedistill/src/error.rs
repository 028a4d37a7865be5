use thiserror::Error;

/// Errors surfaced by every fallible operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value violates its documented range or relationship.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A precondition on runtime data was violated (labels, indices, modes).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// NaN or infinity reached a place that must stay finite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Misuse of the autodiff tape (non-scalar backward, repeated backward, ...).
    #[error("graph error: {0}")]
    Graph(String),

    /// Training diverged or was asked to do something unsupported.
    #[error("training error: {0}")]
    Train(String),

    /// A file had the wrong magic, header, or payload length.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
