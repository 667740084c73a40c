use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad input: an out-of-range index, a malformed layout, a bad config value.
    #[error("validation error: {0}")]
    Validation(String),

    /// An operation was called in a state that forbids it, e.g. stepping a finished episode.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A snapshot or demonstration does not belong to the environment it was applied to.
    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// A binary file or payload could not be decoded.
    #[error("decode error: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn decode(msg: impl Into<String>) -> Self {
        Error::Decode(msg.into())
    }
}
