//! Sorted table files: building, reading and merging.

mod builder;
mod format;
mod merge;
mod reader;

pub use builder::{BufferPool, BuilderOptions, BuiltSst, PendingWrites, SstBuilder, WriteMode};
pub use format::{Footer, FOOTER_LEN, MAGIC};
pub use merge::{collect, BoxedIter, MergeIterator, RecordIter, VecIter};
pub use reader::{verify_table, SstIter, SstReader};
