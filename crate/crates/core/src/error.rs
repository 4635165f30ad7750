use thiserror::Error;

/// Errors raised by model evaluation, Gram assembly and training.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KanError {
    #[error("basis index {index} out of range for a family with {count} functions")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("derivative order {0} unsupported (maximum is 3)")]
    UnsupportedOrder(usize),
    #[error("invalid basis specification: {0}")]
    InvalidBasis(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("forward cache is stale (cache version {cache}, parameter version {params})")]
    StaleCache { cache: u64, params: u64 },
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("series too short or underflowed: {0}")]
    SeriesTooShort(String),
}

pub type Result<T> = std::result::Result<T, KanError>;
