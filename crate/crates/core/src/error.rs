//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across configuration, data handling,
/// training, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("config: {0}")]
    Config(String),

    /// A function argument violates a documented precondition.
    #[error("argument: {0}")]
    Argument(String),

    /// Dataset contents are structurally invalid (shape or label range).
    #[error("data: {0}")]
    Data(String),

    /// A text file failed to parse; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Training could not proceed (e.g. no valid PK batch exists).
    #[error("training: {0}")]
    Training(String),

    /// Evaluation preconditions failed (e.g. a query has no gallery match).
    #[error("evaluation: {0}")]
    Evaluation(String),

    /// Underlying I/O failure.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
