use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value lies outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller-supplied argument is invalid (zero counts, negative rates, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("wrong magic number: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },

    #[error("incomplete IDX header: {0}")]
    Header(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("short read: expected {expected} bytes of payload, found {found}")]
    ShortRead { expected: usize, found: usize },

    #[error("invalid label {label} at index {index}")]
    InvalidLabel { index: usize, label: u8 },

    #[error("training diverged at epoch {epoch}, batch {batch}: {cause}")]
    Diverged {
        epoch: usize,
        batch: usize,
        cause: Box<Error>,
    },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
