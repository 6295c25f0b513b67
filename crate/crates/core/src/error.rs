use thiserror::Error;

/// Errors produced by the eviction library and harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's domain (shape, range, finiteness).
    #[error("domain error: {0}")]
    Domain(String),

    /// The budget cannot hold the positions that must always be kept.
    #[error("budget {budget} is too small; minimum feasible budget is {minimum}")]
    BudgetTooSmall { budget: usize, minimum: usize },

    /// Malformed trace or report file.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
