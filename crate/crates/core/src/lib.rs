//! An LSM-tree key-value store whose compactions do not wait for their
//! output files to reach stable storage.
//!
//! A compaction writes its outputs, submits one fsync batch for all of them
//! and commits the new version right away. The outputs are *volatile* until
//! the batch completes; their inputs stay on disk until then. The
//! [`ledger`] records which inputs each compaction epoch depends on and
//! retires the epoch (mark durable, delete inputs) once its batch and every
//! ancestor batch have completed. The next compaction that would read a
//! still-pending output waits for that batch first, so nothing is ever
//! merged from a file whose parents are already gone.
//!
//! ```no_run
//! use deferlsm::{Db, EngineConfig};
//!
//! let db = Db::open("/tmp/db", EngineConfig::default())?;
//! db.put(b"key", b"value")?;
//! assert_eq!(db.get(b"key")?, Some(b"value".to_vec()));
//! db.close()?;
//! # Ok::<(), deferlsm::Error>(())
//! ```
//!
//! Synchronous compaction ([`CompactionMode::Synchronous`]) fsyncs each
//! output before commit and is kept as the baseline.

mod codec;
pub mod compaction;
pub mod config;
pub mod crash;
pub mod db;
pub mod error;
pub mod io;
pub mod ledger;
pub mod manifest;
pub mod memtable;
pub mod metrics;
pub mod sstable;
pub mod types;
pub mod version;
pub mod wal;

pub use config::{CompactionMode, EngineConfig, IoBackendKind};
pub use db::Db;
pub use error::{Error, Result};
