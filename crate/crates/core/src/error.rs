//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("block shape {br}x{bc} does not divide matrix {rows}x{cols}")]
    BlockShape {
        rows: usize,
        cols: usize,
        br: usize,
        bc: usize,
    },

    #[error("malformed BSR matrix: {}", .0.join("; "))]
    InvalidBsr(Vec<String>),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("ingestion error at byte offset {offset}: {msg}")]
    Ingest { offset: u64, msg: String },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelRange { label: usize, num_classes: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty ledger: no allocations recorded")]
    EmptyLedger,

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
