use thiserror::Error;

/// Errors produced by problem setup, simulation and verification.
#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside horizon [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("unsupported dimension {dim}: {context}")]
    UnsupportedDimension { dim: usize, context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("explicit-step stability violated: dt = {dt} exceeds limit, suggested dt <= {suggested}")]
    Stability { dt: f64, suggested: f64 },

    #[error("{diverged} of {total} paths diverged (non-finite or |x| > {threshold:e})")]
    DivergedPaths {
        diverged: usize,
        total: usize,
        threshold: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
