//! Keys, records and per-file metadata shared by every layer of the engine.

use std::cmp::Ordering;
use std::fmt;

use serde::Serialize;

use crate::codec::{put_bytes, put_u32, put_u64, put_u8, Cursor};
use crate::error::{Error, Result};

pub type SeqNo = u64;
pub type FileId = u64;
pub type EpochId = u64;

/// Largest sequence number; used as the "read everything" snapshot.
pub const MAX_SEQNO: SeqNo = u64::MAX >> 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[repr(u8)]
pub enum ValueKind {
    Delete = 0,
    Put = 1,
}

impl ValueKind {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ValueKind::Delete),
            1 => Ok(ValueKind::Put),
            other => Err(Error::corrupt(format!("unknown value kind {other}"))),
        }
    }
}

/// A user key tagged with the sequence number and kind of the write that
/// produced it.
///
/// Ordering is by user key ascending, then sequence number descending, so
/// the newest version of a key is encountered first.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct InternalKey {
    pub user_key: Vec<u8>,
    pub seqno: SeqNo,
    pub kind: ValueKind,
}

impl InternalKey {
    pub fn new(user_key: impl Into<Vec<u8>>, seqno: SeqNo, kind: ValueKind) -> Self {
        InternalKey {
            user_key: user_key.into(),
            seqno,
            kind,
        }
    }

    /// The smallest internal key for `user_key` visible at `snapshot`.
    pub fn lookup(user_key: &[u8], snapshot: SeqNo) -> Self {
        InternalKey::new(user_key.to_vec(), snapshot, ValueKind::Put)
    }

    pub(crate) fn encode_into(&self, buf: &mut Vec<u8>) {
        put_bytes(buf, &self.user_key);
        put_u64(buf, self.seqno);
        put_u8(buf, self.kind as u8);
    }

    pub(crate) fn decode_from(cur: &mut Cursor<'_>) -> Result<Self> {
        let user_key = cur.bytes()?.to_vec();
        let seqno = cur.u64()?;
        let kind = ValueKind::from_u8(cur.u8()?)?;
        Ok(InternalKey {
            user_key,
            seqno,
            kind,
        })
    }

    pub(crate) fn encoded_len(&self) -> usize {
        4 + self.user_key.len() + 8 + 1
    }
}

/// Total order over internal keys: user key ascending, seqno descending.
pub fn compare_internal_keys(a: &InternalKey, b: &InternalKey) -> Ordering {
    a.user_key
        .cmp(&b.user_key)
        .then_with(|| b.seqno.cmp(&a.seqno))
        .then_with(|| b.kind.cmp(&a.kind))
}

impl Ord for InternalKey {
    fn cmp(&self, other: &Self) -> Ordering {
        compare_internal_keys(self, other)
    }
}

impl PartialOrd for InternalKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for InternalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}@{}:{:?}",
            String::from_utf8_lossy(&self.user_key),
            self.seqno,
            self.kind
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvRecord {
    pub key: InternalKey,
    pub value: Vec<u8>,
}

/// Fixed per-record charge added to key and value bytes when accounting
/// memtable size.
pub const RECORD_OVERHEAD: usize = 16;

impl KvRecord {
    pub fn put(user_key: impl Into<Vec<u8>>, seqno: SeqNo, value: impl Into<Vec<u8>>) -> Self {
        KvRecord {
            key: InternalKey::new(user_key, seqno, ValueKind::Put),
            value: value.into(),
        }
    }

    pub fn delete(user_key: impl Into<Vec<u8>>, seqno: SeqNo) -> Self {
        KvRecord {
            key: InternalKey::new(user_key, seqno, ValueKind::Delete),
            value: Vec::new(),
        }
    }

    pub fn is_tombstone(&self) -> bool {
        self.key.kind == ValueKind::Delete
    }

    /// Bytes charged against the memtable limit for this record.
    pub fn approximate_size(&self) -> usize {
        self.key.user_key.len() + self.value.len() + RECORD_OVERHEAD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Durability {
    /// Written and visible, but its fsync batch has not been confirmed.
    Volatile,
    Durable,
}

/// Metadata describing one on-disk sorted table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SstMeta {
    pub file_id: FileId,
    pub level: u32,
    pub smallest: InternalKey,
    pub largest: InternalKey,
    pub file_size: u64,
    pub durability: Durability,
    pub birth_epoch: EpochId,
    /// CRC32 stored in the file footer.
    pub checksum: u32,
    pub record_count: u64,
}

impl SstMeta {
    /// Whether the user-key range of this file intersects `[lo, hi]`.
    pub fn overlaps(&self, lo: &[u8], hi: &[u8]) -> bool {
        self.smallest.user_key.as_slice() <= hi && self.largest.user_key.as_slice() >= lo
    }

    pub fn contains_user_key(&self, key: &[u8]) -> bool {
        self.overlaps(key, key)
    }

    pub(crate) fn encode_into(&self, buf: &mut Vec<u8>) {
        put_u64(buf, self.file_id);
        put_u32(buf, self.level);
        self.smallest.encode_into(buf);
        self.largest.encode_into(buf);
        put_u64(buf, self.file_size);
        put_u8(
            buf,
            match self.durability {
                Durability::Volatile => 0,
                Durability::Durable => 1,
            },
        );
        put_u64(buf, self.birth_epoch);
        put_u32(buf, self.checksum);
        put_u64(buf, self.record_count);
    }

    pub(crate) fn decode_from(cur: &mut Cursor<'_>) -> Result<Self> {
        let file_id = cur.u64()?;
        let level = cur.u32()?;
        let smallest = InternalKey::decode_from(cur)?;
        let largest = InternalKey::decode_from(cur)?;
        let file_size = cur.u64()?;
        let durability = match cur.u8()? {
            0 => Durability::Volatile,
            1 => Durability::Durable,
            other => return Err(Error::corrupt(format!("bad durability tag {other}"))),
        };
        let birth_epoch = cur.u64()?;
        let checksum = cur.u32()?;
        let record_count = cur.u64()?;
        Ok(SstMeta {
            file_id,
            level,
            smallest,
            largest,
            file_size,
            durability,
            birth_epoch,
            checksum,
            record_count,
        })
    }
}

pub fn sst_file_name(id: FileId) -> String {
    format!("sst-{id}.sst")
}

pub fn wal_file_name(segment: FileId) -> String {
    format!("wal-{segment}.log")
}

pub const MANIFEST_FILE: &str = "MANIFEST";

/// Parses `sst-<id>.sst` / `wal-<id>.log` names.
pub fn parse_file_name(name: &str) -> Option<(FileKind, FileId)> {
    if let Some(rest) = name.strip_prefix("sst-").and_then(|r| r.strip_suffix(".sst")) {
        return rest.parse().ok().map(|id| (FileKind::Sst, id));
    }
    if let Some(rest) = name.strip_prefix("wal-").and_then(|r| r.strip_suffix(".log")) {
        return rest.parse().ok().map(|id| (FileKind::Wal, id));
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Sst,
    Wal,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(u: &str, s: SeqNo) -> InternalKey {
        InternalKey::new(u.as_bytes().to_vec(), s, ValueKind::Put)
    }

    #[test]
    fn user_key_order_dominates() {
        assert_eq!(compare_internal_keys(&k("a", 5), &k("b", 1)), Ordering::Less);
    }

    #[test]
    fn newer_seqno_sorts_first() {
        assert_eq!(compare_internal_keys(&k("a", 5), &k("a", 9)), Ordering::Greater);
    }

    #[test]
    fn identical_keys_compare_equal() {
        assert_eq!(compare_internal_keys(&k("a", 5), &k("a", 5)), Ordering::Equal);
    }

    #[test]
    fn file_names_round_trip() {
        assert_eq!(parse_file_name(&sst_file_name(42)), Some((FileKind::Sst, 42)));
        assert_eq!(parse_file_name(&wal_file_name(7)), Some((FileKind::Wal, 7)));
        assert_eq!(parse_file_name("MANIFEST"), None);
        assert_eq!(parse_file_name("sst-x.sst"), None);
    }

    #[test]
    fn meta_encoding_round_trips() {
        let meta = SstMeta {
            file_id: 9,
            level: 2,
            smallest: k("a", 3),
            largest: InternalKey::new(b"z".to_vec(), 1, ValueKind::Delete),
            file_size: 4096,
            durability: Durability::Volatile,
            birth_epoch: 12,
            checksum: 0xdead_beef,
            record_count: 77,
        };
        let mut buf = Vec::new();
        meta.encode_into(&mut buf);
        let decoded = SstMeta::decode_from(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(decoded, meta);
    }

    proptest::proptest! {
        #[test]
        fn ordering_is_lexicographic_then_reverse_seqno(
            a in proptest::collection::vec(0u8..4, 0..4), sa in 0u64..8,
            b in proptest::collection::vec(0u8..4, 0..4), sb in 0u64..8,
        ) {
            let ka = InternalKey::new(a.clone(), sa, ValueKind::Put);
            let kb = InternalKey::new(b.clone(), sb, ValueKind::Put);
            let expected = (a, std::cmp::Reverse(sa)).cmp(&(b, std::cmp::Reverse(sb)));
            proptest::prop_assert_eq!(ka.cmp(&kb), expected);
        }
    }
}
