use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::Result;
use crate::types::KvRecord;

/// A fallible stream of records in internal-key order.
pub trait RecordIter {
    fn next_record(&mut self) -> Result<Option<KvRecord>>;
}

impl<T: RecordIter + ?Sized> RecordIter for Box<T> {
    fn next_record(&mut self) -> Result<Option<KvRecord>> {
        (**self).next_record()
    }
}

/// Iterator over an owned, already sorted vector.
pub struct VecIter {
    inner: std::vec::IntoIter<KvRecord>,
}

impl VecIter {
    pub fn new(records: Vec<KvRecord>) -> Self {
        VecIter {
            inner: records.into_iter(),
        }
    }
}

impl RecordIter for VecIter {
    fn next_record(&mut self) -> Result<Option<KvRecord>> {
        Ok(self.inner.next())
    }
}

struct HeapItem {
    rec: KvRecord,
    src: usize,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    // Reversed so BinaryHeap pops the smallest key; earlier sources win ties.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .rec
            .key
            .cmp(&self.rec.key)
            .then_with(|| other.src.cmp(&self.src))
    }
}

pub type BoxedIter = Box<dyn RecordIter + Send>;

/// K-way merge keeping only the newest version of each user key.
///
/// Sources are given newest first; on identical internal keys the earlier
/// source wins. Tombstones are emitted unless `drop_tombstones` is set.
pub struct MergeIterator {
    sources: Vec<BoxedIter>,
    heap: BinaryHeap<HeapItem>,
    drop_tombstones: bool,
    started: bool,
}

impl MergeIterator {
    pub fn new(sources: Vec<BoxedIter>, drop_tombstones: bool) -> Self {
        MergeIterator {
            heap: BinaryHeap::with_capacity(sources.len()),
            sources,
            drop_tombstones,
            started: false,
        }
    }

    fn advance(&mut self, src: usize) -> Result<()> {
        if let Some(rec) = self.sources[src].next_record()? {
            self.heap.push(HeapItem { rec, src });
        }
        Ok(())
    }
}

impl RecordIter for MergeIterator {
    fn next_record(&mut self) -> Result<Option<KvRecord>> {
        if !self.started {
            self.started = true;
            for i in 0..self.sources.len() {
                self.advance(i)?;
            }
        }
        loop {
            let Some(top) = self.heap.pop() else {
                return Ok(None);
            };
            self.advance(top.src)?;
            while let Some(next) = self.heap.peek() {
                if next.rec.key.user_key != top.rec.key.user_key {
                    break;
                }
                let src = self.heap.pop().unwrap().src;
                self.advance(src)?;
            }
            if self.drop_tombstones && top.rec.is_tombstone() {
                continue;
            }
            return Ok(Some(top.rec));
        }
    }
}

/// Drains an iterator into a vector.
pub fn collect(iter: &mut dyn RecordIter) -> Result<Vec<KvRecord>> {
    let mut out = Vec::new();
    while let Some(r) = iter.next_record()? {
        out.push(r);
    }
    Ok(out)
}
