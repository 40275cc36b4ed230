//! Turning record streams into table files.
//!
//! Compaction, runtime regeneration and recovery all go through
//! [`write_outputs`], so a regenerated epoch rolls its outputs at exactly
//! the same records as the original run.

use std::sync::Arc;

use crate::crash::{self, CrashPoint};
use crate::error::{Error, Result};
use crate::io::{IoOp, IoQueue, Vfs, VfsFile};
use crate::manifest::LedgerRecord;
use crate::memtable::MemTable;
use crate::sstable::{
    BoxedIter, BufferPool, BuilderOptions, BuiltSst, MergeIterator, PendingWrites, RecordIter,
    SstBuilder, SstReader, WriteMode,
};
use crate::types::{sst_file_name, EpochId, FileId, SstMeta};

pub(crate) struct OutputSink<'a> {
    pub vfs: &'a Vfs,
    pub queue: &'a IoQueue,
    pub pool: &'a Arc<BufferPool>,
    pub level: u32,
    pub epoch: EpochId,
    pub opts: BuilderOptions,
}

/// Drains `iter` into successive tables, rolling whenever a table reaches
/// the target size. `alloc` names each new output; `on_roll` runs after each
/// output is finished. Writes may still be outstanding in `pending` on
/// return.
pub(crate) fn write_outputs(
    sink: &OutputSink<'_>,
    pending: &mut PendingWrites,
    iter: &mut dyn RecordIter,
    mut alloc: impl FnMut() -> Result<(FileId, String)>,
    mut on_roll: impl FnMut(&BuiltSst) -> Result<()>,
) -> Result<Vec<BuiltSst>> {
    let mut out = Vec::new();
    let mut next = iter.next_record()?;
    while let Some(first) = next.take() {
        let (id, name) = alloc()?;
        let file = sink.vfs.create(&name)?;
        let mut b = SstBuilder::new(
            sink.queue,
            pending,
            sink.pool.clone(),
            file,
            id,
            sink.level,
            sink.epoch,
            sink.opts,
        );
        b.add(&first)?;
        while !b.is_full() {
            match iter.next_record()? {
                Some(r) => b.add(&r)?,
                None => break,
            }
        }
        let built = b.finish()?;
        on_roll(&built)?;
        out.push(built);
        next = iter.next_record()?;
    }
    Ok(out)
}

/// Fsync through the queue and wait for it.
pub(crate) fn fsync_wait(queue: &IoQueue, file: &Arc<VfsFile>) -> Result<()> {
    let id = queue.submit(IoOp::Fsync { file: file.clone() })?;
    let out = queue.wait_all(&[id], None);
    match out.events.into_iter().next() {
        Some(ev) => ev.status.into_result(),
        None => Err(Error::corrupt("fsync completion lost")),
    }
}

/// Writes a memtable as one level-0 table and makes it durable.
pub(crate) fn write_l0(
    vfs: &Vfs,
    queue: &IoQueue,
    pool: &Arc<BufferPool>,
    block_size: usize,
    buffer_size: usize,
    mem: &Arc<MemTable>,
    file_id: FileId,
) -> Result<Option<BuiltSst>> {
    let sources: Vec<BoxedIter> = vec![Box::new(mem.iter())];
    let mut iter = MergeIterator::new(sources, false);
    let sink = OutputSink {
        vfs,
        queue,
        pool,
        level: 0,
        epoch: 0,
        opts: BuilderOptions {
            block_size,
            buffer_size,
            target_size: u64::MAX,
            mode: WriteMode::Blocking,
            submit_hook: None,
        },
    };
    let mut pending = PendingWrites::default();
    let mut used = false;
    let mut outs = write_outputs(
        &sink,
        &mut pending,
        &mut iter,
        || {
            if std::mem::replace(&mut used, true) {
                return Err(Error::corrupt("flush rolled a second output"));
            }
            Ok((file_id, sst_file_name(file_id)))
        },
        |_| Ok(()),
    )?;
    pending.wait_all(queue, pool)?;
    let Some(built) = outs.pop() else {
        return Ok(None);
    };
    crash::hit(CrashPoint::FlushWritten);
    fsync_wait(queue, &built.file)?;
    crash::hit(CrashPoint::FlushSynced);
    Ok(Some(built))
}

/// Name used while an epoch's outputs are being rebuilt.
pub(crate) fn regen_name(id: FileId) -> String {
    format!("{}.regen", sst_file_name(id))
}

/// The fields a rebuilt table must reproduce.
pub(crate) fn same_table(a: &SstMeta, b: &SstMeta) -> bool {
    a.file_id == b.file_id
        && a.smallest == b.smallest
        && a.largest == b.largest
        && a.file_size == b.file_size
        && a.checksum == b.checksum
        && a.record_count == b.record_count
}

/// Rebuilds every offspring of `rec` from its parents into `.regen` files,
/// each fsynced, and checks them against the recorded metadata.
pub(crate) fn rebuild_epoch(
    vfs: &Vfs,
    queue: &IoQueue,
    pool: &Arc<BufferPool>,
    buffer_size: usize,
    rec: &LedgerRecord,
) -> Result<Vec<BuiltSst>> {
    let corrupt = |reason: String| Error::LedgerCorruption {
        epoch: rec.epoch,
        reason,
    };
    let mut sources: Vec<BoxedIter> = Vec::new();
    for p in &rec.parents {
        let path = vfs.path(&sst_file_name(p.file_id));
        let r = SstReader::open(&path, p.file_id)
            .map_err(|e| corrupt(format!("parent {} unusable: {e}", p.file_id)))?;
        sources.push(Box::new(r.iter()));
    }
    let mut iter = MergeIterator::new(sources, rec.is_bottom);
    let sink = OutputSink {
        vfs,
        queue,
        pool,
        level: rec.offspring.first().map_or(0, |m| m.level),
        epoch: rec.epoch,
        opts: BuilderOptions {
            block_size: rec.block_size as usize,
            buffer_size: buffer_size.min(rec.target_size.max(1) as usize),
            target_size: rec.target_size,
            mode: WriteMode::Blocking,
            submit_hook: None,
        },
    };
    let mut ids = rec.offspring.iter().map(|m| m.file_id);
    let mut pending = PendingWrites::default();
    let outs = write_outputs(
        &sink,
        &mut pending,
        &mut iter,
        || {
            let id = ids
                .next()
                .ok_or_else(|| Error::corrupt("rebuild produced more outputs than recorded"))?;
            Ok((id, regen_name(id)))
        },
        |_| Ok(()),
    );
    let outs = match outs.and_then(|o| pending.wait_all(queue, pool).map(|_| o)) {
        Ok(o) => o,
        Err(e) => {
            for m in &rec.offspring {
                let _ = vfs.delete(&regen_name(m.file_id));
            }
            return Err(corrupt(format!("rebuild failed: {e}")));
        }
    };
    let matches = outs.len() == rec.offspring.len()
        && outs.iter().zip(&rec.offspring).all(|(b, m)| same_table(&b.meta, m));
    if !matches {
        for b in &outs {
            let _ = vfs.delete(&regen_name(b.meta.file_id));
        }
        return Err(corrupt("rebuilt outputs differ from the recorded ones".into()));
    }
    for b in &outs {
        vfs.sync(&b.file)?;
    }
    Ok(outs)
}
