use thiserror::Error;

/// Errors raised by model construction, sampling, matching and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// The input violates a structural requirement (shape, symmetry, definiteness).
    #[error("structural error: {0}")]
    Structural(String),

    /// The model fails the DMPES conditions.
    #[error("model is not DMPES: {0}")]
    NotDmpes(String),

    /// A matrix is too ill-conditioned to proceed.
    #[error("conditioning error: {0}")]
    Conditioning(String),

    /// Matrix or vector dimensions disagree.
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    /// Inconsistent configuration (sizes, counts, flags).
    #[error("configuration error: {0}")]
    Config(String),

    /// A matching could not be completed under the requested constraints.
    #[error("infeasible matching: {reason} (unmatched treated rows: {unmatched:?})")]
    Infeasible { reason: String, unmatched: Vec<usize> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
