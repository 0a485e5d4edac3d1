use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("matrix is not positive definite (jitter cap {cap:e} exceeded)")]
    NotPositiveDefinite { cap: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("site fixed point mismatch: max relative deviation {max_deviation:e}")]
    FixedPointMismatch { max_deviation: f64 },

    #[error("objective evaluation failed: {0}")]
    EvaluationFailed(String),

    #[error("training diverged at step {step}: objective is not finite")]
    Diverged { step: usize },

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("column {0} has zero standard deviation")]
    DegenerateColumn(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = GpError> = std::result::Result<T, E>;
