use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FsviError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FsviError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cholesky factorization failed for every jitter level (largest tried: {max_jitter:e})")]
    FactorizationFailed { max_jitter: f64 },

    #[error("KL divergence came out negative ({0:e}) beyond round-off tolerance")]
    NegativeKl(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("gradient policy violation: {0}")]
    PolicyViolation(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("empty pixel pool for channel {0}")]
    EmptyPool(usize),

    #[error("referral rate {0} leaves no retained points")]
    EmptyRetainedSet(f64),

    #[error("fractions must be nonnegative and sum to 1 (got sum {0})")]
    InvalidFractions(f64),

    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}: line {line} has {found} columns, expected {expected}")]
    RaggedRows { path: PathBuf, line: usize, expected: usize, found: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("numerical failure in context set {set}: {source}")]
    ContextSet {
        set: usize,
        #[source]
        source: Box<FsviError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FsviError {
    /// True for failures caused by the numerics rather than by the caller's inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            FsviError::FactorizationFailed { .. } | FsviError::NegativeKl(_) => true,
            FsviError::ContextSet { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub(crate) fn dim_mismatch(context: &str, expected: usize, found: usize) -> FsviError {
    FsviError::DimensionMismatch(format!("{context}: expected {expected}, found {found}"))
}
