use thiserror::Error;

/// Errors produced by the library.
///
/// The CLI maps [`Error::Validation`] to exit code 1 and everything else to 2.
#[derive(Debug, Error)]
pub enum Error {
    /// An input file could not be read or decoded.
    #[error("input error: {0}")]
    Input(String),
    /// A precondition or invariant on user-supplied data was violated.
    #[error("validation error: {0}")]
    Validation(String),
    /// A container, checkpoint or config file is malformed.
    #[error("format error: {0}")]
    Format(String),
    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// The clustering backend failed.
    #[error("backend error ({params}): {message}")]
    Backend { message: String, params: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
