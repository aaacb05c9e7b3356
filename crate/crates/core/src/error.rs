use thiserror::Error;

/// Errors surfaced by the numeric, quantization and training layers.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    #[error("invalid quantization parameter: {0}")]
    InvalidQuantParam(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty calibration stream for group {group}")]
    EmptyCalibration { group: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("stage {0} out of range (schedule has {1} stages)")]
    StageOutOfRange(usize, usize),

    #[error("data stream exhausted: need {needed} iterations, stream has {available}")]
    DataExhausted { needed: usize, available: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
