//! Crate-wide error type. Every fallible public operation returns
//! [`Result`] so callers can distinguish contract violations (shape
//! mismatches, overflow) from I/O problems.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("sequence overflow: total length {total} exceeds max_seq_len {max}")]
    SequenceOverflow { total: usize, max: usize },
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("token {token} out of vocabulary (size {vocab})")]
    VocabOutOfRange { token: u32, vocab: usize },
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("gradient trace already consumed")]
    TraceConsumed,
    #[error("loss node is not a scalar")]
    LossNotScalar,
    #[error("selection index {index} out of range for bank of {len}")]
    SelectionOutOfRange { index: usize, len: usize },
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    #[error("quantization bits {0} outside the supported 2..=8 range")]
    BitsOutOfRange(u8),
    #[error("vocabulary too small: {0}")]
    VocabTooSmall(String),
    #[error("malformed container: {0}")]
    BadContainer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
