use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::types::{EpochId, FileId};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("level {0} has no byte capacity (level 0 is triggered by file count)")]
    NotApplicable(u32),

    #[error("engine is closed")]
    Closed,

    #[error("value of {size} bytes exceeds max_value_size {limit}")]
    ValueTooLarge { size: usize, limit: usize },

    #[error("record stream is not sorted by internal key")]
    Unsorted,

    #[error("sst file {path} is unreadable: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("corrupt record: {0}")]
    Corrupt(String),

    #[error("submission queue is full ({depth} requests in flight)")]
    QueueFull { depth: usize },

    #[error("cannot switch I/O backend with {0} requests in flight")]
    InFlight(usize),

    #[error("asynchronous I/O failed (code {code}): {message}")]
    AsyncIo { code: i32, message: String },

    #[error("ledger epoch {epoch} cannot be recovered: {reason}")]
    LedgerCorruption { epoch: EpochId, reason: String },

    #[error("file {0} referenced by the ledger is missing")]
    MissingFile(FileId),

    #[error("simulated power loss")]
    PowerLoss,

    #[error("background work failed: {0}")]
    Background(String),
}

impl Error {
    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }
}
