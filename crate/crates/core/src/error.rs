use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched shapes or configurations between cooperating objects.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input violated an operation precondition (dimensions, ranges).
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Malformed training data, e.g. a class index outside the model's range.
    #[error("data error: {0}")]
    Data(String),

    /// Wire or file formats that cannot be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error("encryption error: {0}")]
    Crypto(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("network error: {0}")]
    Network(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn crypto(msg: impl Into<String>) -> Self {
        Error::Crypto(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
