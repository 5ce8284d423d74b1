use std::io;

/// Every failure mode of the framework.
///
/// `NeedMoreBytes` is the only recoverable decode outcome; a `Protocol`
/// error means the connection it came from must be dropped.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cannot aggregate an empty set of updates")]
    EmptyAggregation,

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("need {needed} more bytes to complete the frame")]
    NeedMoreBytes { needed: usize },

    #[error("encode error: {0}")]
    Encode(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("startup error: {0}")]
    Startup(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("experiment aborted: {0}")]
    Aborted(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(expected: usize, actual: usize) -> Self {
        Error::Dimension { expected, actual }
    }
}
