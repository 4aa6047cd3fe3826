use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm below {epsilon:e} and cannot be normalized")]
    ZeroNormRow { row: usize, epsilon: f64 },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("matrix contains a non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("batch too small: need at least {required} rows, got {found}")]
    BatchTooSmall { required: usize, found: usize },

    #[error("group {0} has no members")]
    EmptyGroup(usize),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("no pair of distinct rows shares a label")]
    NoSameLabelPairs,

    #[error("{n} points cannot be split evenly into {clusters} clusters")]
    IndivisibleClusterCount { n: usize, clusters: usize },

    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated payload: header declares {declared} bytes, {available} available")]
    TruncatedPayload { declared: u64, available: u64 },

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }

    /// True for errors caused by bad user input rather than by a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::NonPositiveTemperature(_)
                | Error::BatchTooSmall { .. }
                | Error::IndivisibleClusterCount { .. }
                | Error::InvalidConfig(_)
        )
    }
}
