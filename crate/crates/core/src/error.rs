use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("I/O error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: io::Error,
    },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at batch {batch_index} (loss1={loss1}, loss2={loss2})")]
    NonFinite {
        batch_index: usize,
        loss1: f64,
        loss2: f64,
    },

    #[error("empty stream: {0}")]
    EmptyStream(&'static str),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Dimension {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}

/// Load-side failures of the binary checkpoint format. Each cause is a
/// distinct variant so callers can tell corruption from incompatibility.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch over bytes 0..{covered}: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum {
        covered: usize,
        stored: u64,
        computed: u64,
    },

    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("malformed section {section} at offset {offset}: {message}")]
    Malformed {
        section: &'static str,
        offset: usize,
        message: String,
    },

    #[error("{0}")]
    Io(#[from] io::Error),
}
