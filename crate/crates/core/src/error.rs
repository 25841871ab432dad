use thiserror::Error;

/// Errors produced by the training, data, and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an API contract (shape mismatch, non-scalar backward
    /// root, mismatched granularity, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed corpus content.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed corpus line, with its 1-based line number.
    #[error("corpus line {line}: {message}")]
    CorpusLine { line: usize, message: String },

    /// A model input with no real tokens.
    #[error("empty input")]
    EmptyInput,

    /// Checkpoint file problems: bad magic, version or shape mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
