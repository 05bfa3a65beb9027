use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Array dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An activation tape or optimizer state does not belong to the
    /// parameters it was used with.
    #[error("state error: {0}")]
    State(String),

    /// NaN or infinity where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Caller broke a precondition (empty batch, negative input, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Conflicting or out-of-range configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent dataset content.
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at iteration {iteration}: {message}")]
    Training { iteration: usize, message: String },

    /// Bad binary file (checkpoint or parameter block).
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        match err.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Data(format!("{other:?}")),
        }
    }
}
