use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed input at row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },

    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("label {label} at row {row} out of range for {class_count} classes")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        class_count: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("space tag mismatch: {0}")]
    TagMismatch(String),

    #[error("bundle field presence mismatch: {0}")]
    FieldMismatch(String),

    #[error("matrix not positive definite (min eigenvalue {min_eig:.3e})")]
    NotPositiveDefinite { min_eig: f64 },

    #[error("required field missing: {0}")]
    MissingField(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("client {client_id} not in roster")]
    NotInRoster { client_id: u32 },

    #[error("round checksum mismatch (round {round_id}): masks did not cancel, a contributor is missing or duplicated")]
    ChecksumMismatch { round_id: u64 },

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
