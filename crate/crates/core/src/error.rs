use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke a shape or range precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error (request id {id}): {message}")]
    Protocol { id: u64, message: String },

    /// Error frame returned by the scoring service, surfaced verbatim.
    #[error("service error: {0}")]
    Service(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Whether retrying the same request could succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}
