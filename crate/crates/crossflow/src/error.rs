//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of tensor or image operands do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration value or file.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data failed validation (missing labels, id collisions, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    /// Training diverged or could not proceed.
    #[error("training failed at step {step}: {message}")]
    Training { step: u64, message: String },

    /// Statistical input with no usable signal (zero variance, too few points).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// No sweep configuration could be selected.
    #[error("selection failed: {0}")]
    Selection(String),

    /// The sweep as a whole failed.
    #[error("sweep failed: {0}")]
    Sweep(String),

    /// A binary file did not match its expected format.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code contract: 2 for usage/config errors, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
