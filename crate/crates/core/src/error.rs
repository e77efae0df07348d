use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Malformed or truncated binary file.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("format error at byte {offset}: {message}")]
pub struct FormatError {
    pub offset: u64,
    pub message: String,
}

impl FormatError {
    pub fn new(offset: u64, message: impl Into<String>) -> Self {
        Self {
            offset,
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("id {id} out of range for {n} instances")]
    IdOutOfRange { id: usize, n: usize },

    #[error("non-finite value in {what} (epoch {epoch}, batch {batch})")]
    Numeric {
        what: String,
        epoch: usize,
        batch: usize,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
