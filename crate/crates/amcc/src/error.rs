use thiserror::Error;

pub type Result<T> = std::result::Result<T, AmccError>;

/// Errors shared across the crate.
///
/// Shape and domain violations are caught eagerly at construction or on entry
/// to an operation; numerical failures carry the subproblem that produced them.
#[derive(Debug, Error)]
pub enum AmccError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("conflicting records: {0}")]
    Conflict(String),

    #[error("id alignment error: {0}")]
    Alignment(String),

    #[error("workers with too few annotations: {0}")]
    UnderAnnotatedWorkers(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("delimited I/O error: {0}")]
    Csv(#[from] csv::Error),
}

impl AmccError {
    pub(crate) fn numerical(context: &str, detail: impl Into<String>) -> Self {
        AmccError::Numerical {
            context: context.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        AmccError::DimensionMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
