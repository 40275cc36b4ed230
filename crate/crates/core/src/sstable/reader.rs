use std::collections::VecDeque;
use std::fs::File;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::format::{decode_block, Footer, IndexEntry, FOOTER_LEN};
use super::merge::RecordIter;
use crate::codec::Cursor;
use crate::error::{Error, Result};
use crate::memtable::Lookup;
use crate::types::{FileId, InternalKey, KvRecord, SeqNo, ValueKind};

/// Bytes fetched per read while iterating.
const READAHEAD: u64 = 256 * 1024;

fn unreadable(path: &Path, reason: impl Into<String>) -> Error {
    Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Parsed {
    footer: Footer,
    index: Vec<IndexEntry>,
    smallest: InternalKey,
    largest: InternalKey,
    file_len: u64,
}

fn parse(file: &File, path: &Path) -> Result<Parsed> {
    let file_len = file.metadata()?.len();
    if file_len < FOOTER_LEN as u64 {
        return Err(unreadable(path, format!("only {file_len} bytes")));
    }
    let mut fbuf = [0u8; FOOTER_LEN];
    file.read_exact_at(&mut fbuf, file_len - FOOTER_LEN as u64)?;
    let footer = Footer::decode(&fbuf).map_err(|e| unreadable(path, e.to_string()))?;
    let tail = footer.index_len as u64 + footer.meta_len as u64;
    if footer.index_offset + tail + FOOTER_LEN as u64 != file_len {
        return Err(unreadable(path, "footer offsets disagree with file length"));
    }
    let mut tail_buf = vec![0u8; tail as usize];
    file.read_exact_at(&mut tail_buf, footer.index_offset)?;
    let (index_bytes, meta_bytes) = tail_buf.split_at(footer.index_len as usize);
    if footer.compute_checksum(index_bytes, meta_bytes) != footer.checksum {
        return Err(unreadable(path, "footer checksum mismatch"));
    }
    let mut index = Vec::new();
    let mut cur = Cursor::new(index_bytes);
    while !cur.is_empty() {
        index.push(IndexEntry::decode_from(&mut cur).map_err(|e| unreadable(path, e.to_string()))?);
    }
    let mut cur = Cursor::new(meta_bytes);
    let smallest = InternalKey::decode_from(&mut cur).map_err(|e| unreadable(path, e.to_string()))?;
    let largest = InternalKey::decode_from(&mut cur).map_err(|e| unreadable(path, e.to_string()))?;
    if index.is_empty() {
        return Err(unreadable(path, "empty index"));
    }
    Ok(Parsed {
        footer,
        index,
        smallest,
        largest,
        file_len,
    })
}

/// Checks the footer, magic and checksum of a table without keeping it
/// open. Returns the footer on success.
pub fn verify_table(path: &Path) -> Result<Footer> {
    let file = File::open(path).map_err(|e| unreadable(path, e.to_string()))?;
    Ok(parse(&file, path)?.footer)
}

/// Read handle for one immutable table. The index is kept in memory.
pub struct SstReader {
    file: File,
    path: PathBuf,
    file_id: FileId,
    footer: Footer,
    index: Vec<IndexEntry>,
    smallest: InternalKey,
    largest: InternalKey,
    file_len: u64,
}

impl std::fmt::Debug for SstReader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SstReader")
            .field("file_id", &self.file_id)
            .field("blocks", &self.index.len())
            .finish()
    }
}

impl SstReader {
    pub fn open(path: impl AsRef<Path>, file_id: FileId) -> Result<Arc<Self>> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| unreadable(path, e.to_string()))?;
        let p = parse(&file, path)?;
        Ok(Arc::new(SstReader {
            file,
            path: path.to_path_buf(),
            file_id,
            footer: p.footer,
            index: p.index,
            smallest: p.smallest,
            largest: p.largest,
            file_len: p.file_len,
        }))
    }

    pub fn file_id(&self) -> FileId {
        self.file_id
    }

    pub fn record_count(&self) -> u64 {
        self.footer.record_count
    }

    pub fn checksum(&self) -> u32 {
        self.footer.checksum
    }

    pub fn file_len(&self) -> u64 {
        self.file_len
    }

    pub fn smallest(&self) -> &InternalKey {
        &self.smallest
    }

    pub fn largest(&self) -> &InternalKey {
        &self.largest
    }

    fn read_block(&self, i: usize) -> Result<Vec<KvRecord>> {
        let e = &self.index[i];
        let mut buf = vec![0u8; e.size as usize];
        self.file.read_exact_at(&mut buf, e.offset)?;
        decode_block(&buf).map_err(|err| unreadable(&self.path, err.to_string()))
    }

    /// First block that may contain keys at or after `key`.
    fn block_for(&self, key: &InternalKey) -> usize {
        self.index.partition_point(|e| e.last_key < *key)
    }

    /// Newest version of `user_key` visible at `snapshot`.
    pub fn get(&self, user_key: &[u8], snapshot: SeqNo) -> Result<Option<Lookup>> {
        if user_key < self.smallest.user_key.as_slice() || user_key > self.largest.user_key.as_slice() {
            return Ok(None);
        }
        let probe = InternalKey::lookup(user_key, snapshot);
        let i = self.block_for(&probe);
        if i >= self.index.len() {
            return Ok(None);
        }
        for rec in self.read_block(i)? {
            if rec.key < probe {
                continue;
            }
            if rec.key.user_key != user_key {
                return Ok(None);
            }
            return Ok(Some(match rec.key.kind {
                ValueKind::Put => Lookup::Found(rec.value),
                ValueKind::Delete => Lookup::Deleted,
            }));
        }
        Ok(None)
    }

    /// Iterates every record in key order.
    pub fn iter(self: &Arc<Self>) -> SstIter {
        SstIter {
            reader: self.clone(),
            next_block: 0,
            buffered: VecDeque::new(),
            skip_below: None,
        }
    }

    /// Iterates records at or after the newest version of `user_key`.
    pub fn iter_from(self: &Arc<Self>, user_key: &[u8]) -> SstIter {
        let probe = InternalKey::lookup(user_key, crate::types::MAX_SEQNO);
        SstIter {
            reader: self.clone(),
            next_block: self.block_for(&probe),
            buffered: VecDeque::new(),
            skip_below: Some(probe),
        }
    }

    /// Reads all records; intended for tests and tools.
    pub fn read_all(self: &Arc<Self>) -> Result<Vec<KvRecord>> {
        let mut it = self.iter();
        let mut out = Vec::with_capacity(self.record_count() as usize);
        while let Some(r) = it.next_record()? {
            out.push(r);
        }
        Ok(out)
    }
}

pub struct SstIter {
    reader: Arc<SstReader>,
    next_block: usize,
    buffered: VecDeque<KvRecord>,
    skip_below: Option<InternalKey>,
}

impl SstIter {
    fn fill(&mut self) -> Result<()> {
        let r = &self.reader;
        if self.next_block >= r.index.len() {
            return Ok(());
        }
        let first = self.next_block;
        let start = r.index[first].offset;
        let mut last = first;
        while last + 1 < r.index.len() && r.index[last + 1].offset + r.index[last + 1].size as u64 - start <= READAHEAD {
            last += 1;
        }
        let end = r.index[last].offset + r.index[last].size as u64;
        let mut buf = vec![0u8; (end - start) as usize];
        r.file.read_exact_at(&mut buf, start)?;
        for e in &r.index[first..=last] {
            let lo = (e.offset - start) as usize;
            let block = &buf[lo..lo + e.size as usize];
            let recs = decode_block(block).map_err(|err| unreadable(&r.path, err.to_string()))?;
            self.buffered.extend(recs);
        }
        self.next_block = last + 1;
        if let Some(probe) = self.skip_below.take() {
            while self.buffered.front().is_some_and(|r| r.key < probe) {
                self.buffered.pop_front();
            }
        }
        Ok(())
    }
}

impl RecordIter for SstIter {
    fn next_record(&mut self) -> Result<Option<KvRecord>> {
        while self.buffered.is_empty() && self.next_block < self.reader.index.len() {
            self.fill()?;
        }
        Ok(self.buffered.pop_front())
    }
}
