use thiserror::Error;

/// Error type shared across the library.
///
/// Variants are grouped by failure class so that callers (in particular the
/// CLI) can map them to stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or sequence dimensions do not line up.
    #[error("dimension error: {0}")]
    Shape(String),

    /// A documented precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed data in a corpus, checkpoint, or model file.
    #[error("format error: {0}")]
    Format(String),

    /// Numerical failure (NaN loss, divergence).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A required artifact is missing; names the command that produces it.
    #[error("missing artifact: {path} (produce it with `{producer}`)")]
    MissingArtifact { path: String, producer: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
