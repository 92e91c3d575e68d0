//! Error type shared by the whole crate.

use thiserror::Error;

/// Errors raised by the numerical kernels, the optimizers and the CLI.
#[derive(Debug, Error)]
pub enum SngdError {
    /// Shapes of the operands do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A Cholesky factorization hit a non-positive pivot.
    #[error("matrix is not positive definite (failing pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    /// A matrix that must be invertible is singular.
    #[error("singular matrix: {0}")]
    Singular(String),
    /// Two structured objects belong to different group kinds.
    #[error("group kind mismatch: {0}")]
    KindMismatch(String),
    /// An objective lacks an oracle that the requested method needs.
    #[error("missing capability: {0}")]
    Capability(String),
    /// A computation produced non-finite numbers or left its domain.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// A run configuration or argument is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// File-system failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed JSON input.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SngdError>;
