use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::format::{
    encode_record, meta_len, Footer, IndexEntry, BLOCK_TRAILER, FOOTER_LEN,
};
use crate::crash::{self, CrashPoint};
use crate::error::{Error, Result};
use crate::io::{CompletionEvent, IoOp, IoQueue, IoStatus, ReqId, VfsFile};
use crate::types::{Durability, EpochId, FileId, InternalKey, KvRecord, SstMeta};

/// Recycles write buffers once their completion has been harvested.
pub struct BufferPool {
    size: usize,
    free: Mutex<Vec<Vec<u8>>>,
}

impl BufferPool {
    pub fn new(size: usize) -> Arc<Self> {
        Arc::new(BufferPool {
            size,
            free: Mutex::new(Vec::new()),
        })
    }

    pub fn get(&self) -> Vec<u8> {
        self.free
            .lock()
            .pop()
            .unwrap_or_else(|| Vec::with_capacity(self.size))
    }

    pub fn put(&self, mut buf: Vec<u8>) {
        buf.clear();
        let mut free = self.free.lock();
        if free.len() < 64 {
            free.push(buf);
        }
    }

    pub fn recycle(&self, events: &mut [CompletionEvent]) {
        for ev in events {
            if let Some(b) = ev.buffer.take() {
                self.put(b);
            }
        }
    }
}

/// Outstanding write submissions of one job, possibly spanning several
/// output files.
#[derive(Debug, Default)]
pub struct PendingWrites {
    ids: VecDeque<ReqId>,
    error: Option<IoStatus>,
    /// Time blocked on write completions or queue backpressure.
    pub wait: Duration,
    pub submissions: usize,
    pub bytes: u64,
}

impl PendingWrites {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> Vec<ReqId> {
        self.ids.iter().copied().collect()
    }

    fn harvest(&mut self, queue: &IoQueue, pool: &BufferPool, ids: &[ReqId]) {
        let start = Instant::now();
        let mut out = queue.wait_all(ids, None);
        self.wait += start.elapsed();
        if let Some(st) = out.first_error() {
            self.error.get_or_insert_with(|| st.clone());
        }
        pool.recycle(&mut out.events);
    }

    /// Waits for the oldest half of the outstanding writes.
    fn drain_some(&mut self, queue: &IoQueue, pool: &BufferPool) {
        let n = (self.ids.len() / 2).max(1).min(self.ids.len());
        let ids: Vec<ReqId> = self.ids.drain(..n).collect();
        self.harvest(queue, pool, &ids);
    }

    /// Blocks until every outstanding write has completed; reports the
    /// first failure seen by this job.
    pub fn wait_all(&mut self, queue: &IoQueue, pool: &BufferPool) -> Result<()> {
        let ids: Vec<ReqId> = self.ids.drain(..).collect();
        if !ids.is_empty() {
            self.harvest(queue, pool, &ids);
        }
        match self.error.take() {
            Some(st) => st.into_result(),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteMode {
    /// Each buffer submission is awaited before building continues.
    Blocking,
    /// Submissions are left outstanding and returned to the caller.
    Deferred,
}

#[derive(Debug, Clone, Copy)]
pub struct BuilderOptions {
    pub block_size: usize,
    pub buffer_size: usize,
    pub target_size: u64,
    pub mode: WriteMode,
    /// Crash hook fired after every buffer submission.
    pub submit_hook: Option<CrashPoint>,
}

/// Result of a finished table.
pub struct BuiltSst {
    pub meta: SstMeta,
    pub file: Arc<VfsFile>,
    /// Sizes of the buffer submissions that made up the file.
    pub submissions: Vec<usize>,
}

/// Streams sorted records into an SST file through fixed-size buffer
/// submissions.
pub struct SstBuilder<'q> {
    queue: &'q IoQueue,
    pending: &'q mut PendingWrites,
    pool: Arc<BufferPool>,
    file: Arc<VfsFile>,
    file_id: FileId,
    level: u32,
    birth_epoch: EpochId,
    opts: BuilderOptions,
    block: Vec<u8>,
    block_last: Option<InternalKey>,
    buffer: Vec<u8>,
    /// Bytes handed to the I/O engine so far.
    submitted: u64,
    /// Bytes of finished blocks (submitted or buffered).
    data_len: u64,
    index: Vec<u8>,
    smallest: Option<InternalKey>,
    last: Option<InternalKey>,
    record_count: u64,
    submissions: Vec<usize>,
}

impl<'q> SstBuilder<'q> {
    pub fn new(
        queue: &'q IoQueue,
        pending: &'q mut PendingWrites,
        pool: Arc<BufferPool>,
        file: Arc<VfsFile>,
        file_id: FileId,
        level: u32,
        birth_epoch: EpochId,
        opts: BuilderOptions,
    ) -> Self {
        let buffer = pool.get();
        SstBuilder {
            queue,
            pending,
            pool,
            file,
            file_id,
            level,
            birth_epoch,
            opts,
            block: Vec::with_capacity(opts.block_size + 256),
            block_last: None,
            buffer,
            submitted: 0,
            data_len: 0,
            index: Vec::new(),
            smallest: None,
            last: None,
            record_count: 0,
            submissions: Vec::new(),
        }
    }

    pub fn file_id(&self) -> FileId {
        self.file_id
    }

    pub fn record_count(&self) -> u64 {
        self.record_count
    }

    pub fn add(&mut self, rec: &KvRecord) -> Result<()> {
        if let Some(last) = &self.last {
            if rec.key <= *last {
                return Err(Error::Unsorted);
            }
        }
        if self.smallest.is_none() {
            self.smallest = Some(rec.key.clone());
        }
        encode_record(&mut self.block, rec);
        self.block_last = Some(rec.key.clone());
        self.last = Some(rec.key.clone());
        self.record_count += 1;
        if self.block.len() >= self.opts.block_size {
            self.finish_block()?;
        }
        Ok(())
    }

    /// Size of the file if it were finished now.
    pub fn estimated_size(&self) -> u64 {
        let mut size = self.data_len + self.index.len() as u64 + FOOTER_LEN as u64;
        if let Some(last) = &self.block_last {
            size += (self.block.len() + BLOCK_TRAILER + IndexEntry::encoded_len(last)) as u64;
        }
        if let (Some(s), Some(l)) = (&self.smallest, &self.last) {
            size += meta_len(s, l) as u64;
        }
        size
    }

    /// True once the file has reached the target size; the caller should
    /// finish it and roll to a new output.
    pub fn is_full(&self) -> bool {
        self.estimated_size() >= self.opts.target_size
    }

    fn finish_block(&mut self) -> Result<()> {
        let Some(last) = self.block_last.take() else {
            return Ok(());
        };
        let crc = crc32fast::hash(&self.block);
        self.block.extend_from_slice(&crc.to_le_bytes());
        let entry = IndexEntry {
            last_key: last,
            offset: self.data_len,
            size: self.block.len() as u32,
        };
        entry.encode_into(&mut self.index);
        self.data_len += self.block.len() as u64;
        let block = std::mem::take(&mut self.block);
        self.push_bytes(&block)?;
        self.block = block;
        self.block.clear();
        Ok(())
    }

    fn push_bytes(&mut self, mut bytes: &[u8]) -> Result<()> {
        while !bytes.is_empty() {
            let room = self.opts.buffer_size - self.buffer.len();
            let n = room.min(bytes.len());
            self.buffer.extend_from_slice(&bytes[..n]);
            bytes = &bytes[n..];
            if self.buffer.len() == self.opts.buffer_size {
                self.submit_buffer()?;
            }
        }
        Ok(())
    }

    fn submit_buffer(&mut self) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        while self.queue.pending() >= self.queue.depth() && !self.pending.is_empty() {
            self.pending.drain_some(self.queue, &self.pool);
        }
        let buf = std::mem::replace(&mut self.buffer, self.pool.get());
        let len = buf.len();
        let id = self.queue.submit(IoOp::Write {
            file: self.file.clone(),
            offset: self.submitted,
            buf,
        })?;
        self.submitted += len as u64;
        self.submissions.push(len);
        self.pending.submissions += 1;
        self.pending.bytes += len as u64;
        self.pending.ids.push_back(id);
        if let Some(p) = self.opts.submit_hook {
            crash::hit(p);
        }
        if self.opts.mode == WriteMode::Blocking {
            self.pending.wait_all(self.queue, &self.pool)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<BuiltSst> {
        if self.record_count == 0 {
            return Err(Error::corrupt("cannot finish an empty table"));
        }
        self.finish_block()?;
        let smallest = self.smallest.take().unwrap();
        let largest = self.last.take().unwrap();
        let mut meta_block = Vec::with_capacity(meta_len(&smallest, &largest));
        smallest.encode_into(&mut meta_block);
        largest.encode_into(&mut meta_block);
        let mut footer = Footer {
            index_offset: self.data_len,
            index_len: self.index.len() as u32,
            meta_len: meta_block.len() as u32,
            record_count: self.record_count,
            checksum: 0,
        };
        footer.checksum = footer.compute_checksum(&self.index, &meta_block);
        let index = std::mem::take(&mut self.index);
        self.push_bytes(&index)?;
        self.push_bytes(&meta_block)?;
        self.push_bytes(&footer.encode())?;
        self.submit_buffer()?;
        let file_size = self.submitted;
        let unused = std::mem::take(&mut self.buffer);
        self.pool.put(unused);
        Ok(BuiltSst {
            meta: SstMeta {
                file_id: self.file_id,
                level: self.level,
                smallest,
                largest,
                file_size,
                durability: Durability::Volatile,
                birth_epoch: self.birth_epoch,
                checksum: footer.checksum,
                record_count: self.record_count,
            },
            file: self.file,
            submissions: self.submissions,
        })
    }
}
