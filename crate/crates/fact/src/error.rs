//! Toolkit errors.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FactError {
    #[error("LENGTH_MISMATCH: {0}")]
    LengthMismatch(String),

    #[error("EMPTY_RESULTS: nothing to aggregate")]
    EmptyResults,

    #[error("ZERO_WEIGHT: weighted aggregation with a total sample count of zero")]
    ZeroWeight,

    #[error("NONFINITE_LOSS: {0}")]
    NonFiniteLoss(String),

    #[error("DEGENERATE_K: {0}")]
    DegenerateK(String),

    #[error("NOT_INITIALIZED: {0}")]
    NotInitialized(String),

    #[error("ROUND_EMPTY: {0}")]
    RoundEmpty(String),

    #[error("BAD_CONFIG: {0}")]
    BadConfig(String),

    #[error("training round failed: {0}")]
    RoundFailed(String),

    #[error(transparent)]
    Runtime(#[from] feddart::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FactError>;
