//! Error type shared across the crate.

use thiserror::Error;

/// Unified error for every fallible operation in the crate.
///
/// `Config`, `Validation`, `Lexicon` and `Input` mark bad user input; the CLI
/// maps those to exit code 1 and everything else to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("validation error at `{path}`: {message}")]
    Validation { path: String, message: String },
    #[error("lexicon error: {0}")]
    Lexicon(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("scoring error: {0}")]
    Scoring(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than internal failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Validation { .. } | Error::Lexicon(_) | Error::Input(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for building a shape error.
pub fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
