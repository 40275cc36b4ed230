use std::ops::Bound;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_skiplist::SkipMap;

use crate::error::Result;
use crate::sstable::RecordIter;
use crate::types::{FileId, InternalKey, KvRecord, SeqNo, ValueKind};

/// Result of a point lookup in one source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lookup {
    Found(Vec<u8>),
    Deleted,
}

/// Ordered in-memory buffer of recent writes, backed by a skiplist.
pub struct MemTable {
    map: SkipMap<InternalKey, Vec<u8>>,
    approximate_bytes: AtomicUsize,
    immutable: AtomicBool,
    wal_segment: FileId,
    max_seqno: AtomicU64,
}

impl MemTable {
    pub fn new(wal_segment: FileId) -> Self {
        MemTable {
            map: SkipMap::new(),
            approximate_bytes: AtomicUsize::new(0),
            immutable: AtomicBool::new(false),
            wal_segment,
            max_seqno: AtomicU64::new(0),
        }
    }

    pub fn insert(&self, rec: KvRecord) {
        debug_assert!(!self.is_immutable(), "insert into immutable memtable");
        self.approximate_bytes
            .fetch_add(rec.approximate_size(), Ordering::Relaxed);
        self.max_seqno.fetch_max(rec.key.seqno, Ordering::Relaxed);
        self.map.insert(rec.key, rec.value);
    }

    pub fn get(&self, user_key: &[u8], snapshot: SeqNo) -> Option<Lookup> {
        let probe = InternalKey::lookup(user_key, snapshot);
        let entry = self.map.range(probe..).next()?;
        if entry.key().user_key != user_key {
            return None;
        }
        Some(match entry.key().kind {
            ValueKind::Put => Lookup::Found(entry.value().clone()),
            ValueKind::Delete => Lookup::Deleted,
        })
    }

    pub fn approximate_bytes(&self) -> usize {
        self.approximate_bytes.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn freeze(&self) {
        self.immutable.store(true, Ordering::Release);
    }

    pub fn is_immutable(&self) -> bool {
        self.immutable.load(Ordering::Acquire)
    }

    pub fn wal_segment(&self) -> FileId {
        self.wal_segment
    }

    pub fn max_seqno(&self) -> SeqNo {
        self.max_seqno.load(Ordering::Relaxed)
    }

    /// Sorted iterator over every record, holding the memtable alive.
    pub fn iter(self: &Arc<Self>) -> MemTableIter {
        MemTableIter {
            table: self.clone(),
            last: None,
        }
    }
}

pub struct MemTableIter {
    table: Arc<MemTable>,
    last: Option<InternalKey>,
}

impl RecordIter for MemTableIter {
    fn next_record(&mut self) -> Result<Option<KvRecord>> {
        let entry = match &self.last {
            None => self.table.map.front(),
            Some(k) => self
                .table
                .map
                .range((Bound::Excluded(k.clone()), Bound::Unbounded))
                .next(),
        };
        Ok(entry.map(|e| {
            self.last = Some(e.key().clone());
            KvRecord {
                key: e.key().clone(),
                value: e.value().clone(),
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newest_version_wins_and_tombstones_shadow() {
        let m = MemTable::new(1);
        m.insert(KvRecord::put("k", 1, "old"));
        m.insert(KvRecord::put("k", 2, "new"));
        assert_eq!(m.get(b"k", 10), Some(Lookup::Found(b"new".to_vec())));
        assert_eq!(m.get(b"k", 1), Some(Lookup::Found(b"old".to_vec())));
        m.insert(KvRecord::delete("k", 3));
        assert_eq!(m.get(b"k", 10), Some(Lookup::Deleted));
        assert_eq!(m.get(b"j", 10), None);
        assert_eq!(m.get(b"ka", 10), None);
    }

    #[test]
    fn byte_accounting_matches_record_sizes() {
        let m = MemTable::new(1);
        let recs = [
            KvRecord::put("a", 1, vec![0u8; 100]),
            KvRecord::put("bb", 2, vec![0u8; 7]),
            KvRecord::delete("c", 3),
        ];
        let expected: usize = recs.iter().map(|r| r.key.user_key.len() + r.value.len() + 16).sum();
        for r in recs {
            m.insert(r);
        }
        assert_eq!(m.approximate_bytes(), expected);
        assert_eq!(m.max_seqno(), 3);
    }

    #[test]
    fn iterator_yields_internal_key_order() {
        let m = Arc::new(MemTable::new(1));
        m.insert(KvRecord::put("b", 1, "x"));
        m.insert(KvRecord::put("a", 2, "y"));
        m.insert(KvRecord::put("b", 3, "z"));
        let mut it = m.iter();
        let mut keys = Vec::new();
        while let Some(r) = it.next_record().unwrap() {
            keys.push((r.key.user_key, r.key.seqno));
        }
        assert_eq!(
            keys,
            vec![(b"a".to_vec(), 2), (b"b".to_vec(), 3), (b"b".to_vec(), 1)]
        );
    }
}
