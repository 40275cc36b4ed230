//! Compaction jobs and the engine side of the durability ledger.

use std::collections::HashMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::build::{fsync_wait, rebuild_epoch, regen_name, write_outputs, OutputSink};
use super::{Inner, LedgerCore};
use crate::compaction::{pick, CompactionPlan};
use crate::config::CompactionMode;
use crate::crash::{self, CrashPoint};
use crate::error::{Error, Result};
use crate::io::{CompletionEvent, IoOp, IoQueue, IoStatus, ReqId, VfsFile};
use crate::ledger::{Ledger, LedgerHost};
use crate::manifest::{Edit, LedgerRecord};
use crate::metrics::{add_duration, EventKind};
use crate::sstable::{BoxedIter, BuilderOptions, BuiltSst, MergeIterator, PendingWrites, WriteMode};
use crate::types::{sst_file_name, Durability, EpochId, FileId, SstMeta};

/// Engine operations the ledger drives, with the ledger lock held.
struct Host<'a> {
    inner: &'a Inner,
    epoch_files: &'a mut HashMap<EpochId, Vec<Arc<VfsFile>>>,
    batch_epoch: &'a mut HashMap<ReqId, EpochId>,
}

impl Host<'_> {
    fn completed(&mut self, ev: &CompletionEvent) {
        if let Some(epoch) = self.batch_epoch.remove(&ev.req_id) {
            self.inner
                .schedule
                .record_at(EventKind::BatchCompleted, epoch, ev.complete_time);
        }
    }
}

impl LedgerHost for Host<'_> {
    fn poll_batch(&mut self, batch: ReqId) -> Option<IoStatus> {
        let ev = self.inner.ledger_q.take_ready(&[batch]).into_iter().next()?;
        self.completed(&ev);
        Some(ev.status)
    }

    fn wait_batch(&mut self, batch: ReqId) -> IoStatus {
        let out = self.inner.ledger_q.wait_all(&[batch], None);
        match out.events.into_iter().next() {
            Some(ev) => {
                self.completed(&ev);
                ev.status
            }
            None => IoStatus::IoError {
                code: -1,
                message: format!("completion of batch {} lost", batch.0),
            },
        }
    }

    fn resubmit_fsync(&mut self, epoch: EpochId, _files: &[FileId]) -> Result<ReqId> {
        let files = self.epoch_files.get(&epoch).cloned().unwrap_or_default();
        let id = self.inner.ledger_q.submit(IoOp::FsyncBatch { files })?;
        self.batch_epoch.insert(id, epoch);
        Ok(id)
    }

    fn regenerate(&mut self, epoch: EpochId) -> Result<()> {
        let files = self.inner.regenerate_epoch(epoch)?;
        self.epoch_files.insert(epoch, files);
        Ok(())
    }

    fn mark_durable(&mut self, _epoch: EpochId, files: &[FileId]) -> Result<()> {
        let edits = files.iter().map(|&file_id| Edit::MarkDurable { file_id }).collect();
        self.inner.commit(edits)?;
        crash::hit(CrashPoint::LedgerMarkedDurable);
        Ok(())
    }

    fn delete_parents(&mut self, _epoch: EpochId, files: &[FileId]) -> Result<()> {
        for f in files {
            self.inner.vfs.delete(&sst_file_name(*f))?;
        }
        crash::hit(CrashPoint::LedgerParentsDeleted);
        Ok(())
    }

    fn close(&mut self, epoch: EpochId) -> Result<()> {
        self.inner.commit(vec![Edit::LedgerClose { epoch }])?;
        self.epoch_files.remove(&epoch);
        self.inner.schedule.record(EventKind::Retired, epoch);
        crash::hit(CrashPoint::LedgerClosed);
        Ok(())
    }
}

/// Failure of a job before its commit. Only I/O failures leave the engine
/// usable.
pub(super) fn is_recoverable(e: &Error) -> bool {
    matches!(e, Error::AsyncIo { .. } | Error::Io(_) | Error::QueueFull { .. })
}

impl Inner {
    pub(super) fn with_ledger<T>(
        &self,
        f: impl FnOnce(&mut Ledger, &mut dyn LedgerHost) -> Result<T>,
    ) -> Result<T> {
        let mut guard = self.ledger.lock();
        let LedgerCore {
            ledger,
            epoch_files,
            batch_epoch,
        } = &mut *guard;
        let mut host = Host {
            inner: self,
            epoch_files,
            batch_epoch,
        };
        f(ledger, &mut host)
    }

    /// Rewrites the offspring of an open epoch from its parents, under the
    /// same file ids, and swaps them in. Returns the new file handles.
    fn regenerate_epoch(&self, epoch: EpochId) -> Result<Vec<Arc<VfsFile>>> {
        let rec = self
            .versions
            .lock()
            .state()
            .ledger
            .get(&epoch)
            .cloned()
            .ok_or_else(|| Error::LedgerCorruption {
                epoch,
                reason: "no ledger record in the MANIFEST".into(),
            })?;
        tracing::warn!(epoch, "regenerating compaction outputs");
        let queue = self.io.queue(self.config.io_queue_depth);
        let built = rebuild_epoch(
            &self.vfs,
            &queue,
            &self.pool,
            self.config.merge_buffer_size as usize,
            &rec,
        )?;
        let mut files = Vec::with_capacity(built.len());
        let ids: Vec<FileId> = built.iter().map(|b| b.meta.file_id).collect();
        for id in &ids {
            let name = sst_file_name(*id);
            self.vfs.rename(&regen_name(*id), &name)?;
            files.push(self.vfs.open_existing(&name)?);
        }
        let mut v = self.versions.lock();
        v.reopen(&ids)?;
        self.install(v.current());
        Ok(files)
    }

    pub(super) fn compaction_loop(&self) {
        let queue = self.io.queue(self.config.io_queue_depth);
        while !self.shutdown.load(Ordering::Acquire) && self.bg_error.lock().is_none() {
            let Some(plan) = self.pick_job() else {
                continue;
            };
            let res = self.run_job(&queue, &plan);
            {
                let mut s = self.sched.lock();
                for m in plan.all_inputs() {
                    s.busy.remove(&m.file_id);
                }
                s.running -= 1;
            }
            self.work_cv.notify_all();
            if let Err(e) = res {
                if is_recoverable(&e) {
                    tracing::warn!(error = %e, "compaction aborted");
                    self.aborted_jobs.fetch_add(1, Ordering::Relaxed);
                    std::thread::sleep(Duration::from_millis(10));
                } else {
                    self.set_error(&e);
                    return;
                }
            }
        }
    }

    /// Picks and marks a job busy, or waits briefly and returns `None`.
    /// In asynchronous mode a plan that reads volatile files is picked again
    /// after retiring whatever epochs have already completed, which often
    /// turns those inputs durable or steers the pick elsewhere.
    fn pick_job(&self) -> Option<CompactionPlan> {
        let async_mode = self.compaction_mode() == CompactionMode::Asynchronous;
        for attempt in 0..2 {
            let mut guard = self.sched.lock();
            let levels = self.current.read().metas();
            let s = &mut *guard;
            let saved = s.cursors.clone();
            let Some(plan) = pick(&levels, &s.busy, &mut s.cursors, &self.config) else {
                self.work_cv.wait_for(&mut guard, Duration::from_millis(20));
                return None;
            };
            if async_mode && attempt == 0 && plan.reads_volatile() {
                s.cursors = saved;
                drop(guard);
                if let Err(e) = self.with_ledger(|l, h| l.checkup_begin(h)) {
                    if !is_recoverable(&e) {
                        self.set_error(&e);
                    }
                    return None;
                }
                continue;
            }
            s.busy.extend(plan.all_inputs().map(|m| m.file_id));
            s.running += 1;
            return Some(plan);
        }
        None
    }

    fn run_job(&self, queue: &IoQueue, plan: &CompactionPlan) -> Result<()> {
        if plan.is_trivial_move() {
            return self.trivial_move(plan);
        }
        let start = Instant::now();
        let epoch = self.versions.lock().new_epoch();
        self.schedule.record(EventKind::Picked, epoch);
        let mode = self.compaction_mode();
        let input_ids: Vec<FileId> = plan.all_inputs().map(|m| m.file_id).collect();
        if mode == CompactionMode::Asynchronous {
            let t = Instant::now();
            if self.with_ledger(|l, h| l.checkup(h, &input_ids))? {
                add_duration(&self.counters.fsync_wait_ns, t.elapsed());
                self.schedule.record(EventKind::Fallback, epoch);
            }
        }
        self.schedule.record(EventKind::MergeStarted, epoch);

        let version = self.current.read().clone();
        let sources: Vec<BoxedIter> = version
            .files()
            .filter(|t| input_ids.contains(&t.meta.file_id))
            .map(|t| Box::new(t.reader.iter()) as BoxedIter)
            .collect();
        drop(version);
        if sources.len() != input_ids.len() {
            return Err(Error::corrupt("compaction input vanished from the version"));
        }
        let mut iter = MergeIterator::new(sources, plan.is_bottom);
        let target = self.config.sst_target_size;
        let sink = OutputSink {
            vfs: &self.vfs,
            queue,
            pool: &self.pool,
            level: plan.output_level,
            epoch,
            opts: BuilderOptions {
                block_size: self.config.block_size as usize,
                buffer_size: (self.config.merge_buffer_size as usize).min(target.max(1) as usize),
                target_size: target,
                mode: match mode {
                    CompactionMode::Asynchronous => WriteMode::Deferred,
                    CompactionMode::Synchronous => WriteMode::Blocking,
                },
                submit_hook: Some(CrashPoint::CompactionWriteSubmitted),
            },
        };
        let mut pending = PendingWrites::default();
        let mut created: Vec<FileId> = Vec::new();
        let mut sync_wait = Duration::ZERO;
        let written = write_outputs(
            &sink,
            &mut pending,
            &mut iter,
            || {
                let id = self.versions.lock().new_file_id();
                created.push(id);
                Ok((id, sst_file_name(id)))
            },
            |b| {
                if mode == CompactionMode::Synchronous {
                    let t = Instant::now();
                    fsync_wait(queue, &b.file)?;
                    sync_wait += t.elapsed();
                    crash::hit(CrashPoint::SyncOutputSynced);
                } else {
                    crash::hit(CrashPoint::CompactionOutputRolled);
                }
                Ok(())
            },
        );
        let drained = pending.wait_all(queue, &self.pool);
        let outputs = match written.and_then(|o| drained.map(|_| o)) {
            Ok(o) => o,
            Err(e) => {
                for id in &created {
                    let _ = self.vfs.delete(&sst_file_name(*id));
                }
                return Err(e);
            }
        };
        add_duration(&self.counters.write_wait_ns, pending.wait);
        add_duration(&self.counters.fsync_wait_ns, sync_wait);
        crash::hit(CrashPoint::CompactionWritesDone);
        self.schedule.record(EventKind::WritesDone, epoch);

        let commit_start = Instant::now();
        let out_bytes: u64 = outputs.iter().map(|b| b.meta.file_size).sum();
        let n_outputs = outputs.len() as u64;
        match mode {
            CompactionMode::Synchronous => self.commit_sync(plan, &outputs)?,
            CompactionMode::Asynchronous => self.commit_async(plan, epoch, outputs)?,
        }
        add_duration(&self.counters.commit_ns, commit_start.elapsed());
        self.schedule.record(EventKind::Committed, epoch);
        let c = &self.counters;
        c.compaction_read_bytes.fetch_add(plan.input_bytes(), Ordering::Relaxed);
        c.compaction_write_bytes.fetch_add(out_bytes, Ordering::Relaxed);
        c.compaction_output_files.fetch_add(n_outputs, Ordering::Relaxed);
        c.compactions.fetch_add(1, Ordering::Relaxed);
        add_duration(&c.compaction_ns, start.elapsed());
        Ok(())
    }

    fn delete_edits(plan: &CompactionPlan) -> impl Iterator<Item = Edit> + '_ {
        plan.all_inputs().map(|m| Edit::DeleteFile {
            file_id: m.file_id,
            level: m.level,
        })
    }

    fn commit_sync(&self, plan: &CompactionPlan, outputs: &[BuiltSst]) -> Result<()> {
        let mut edits: Vec<Edit> = outputs
            .iter()
            .map(|b| {
                Edit::AddFile(SstMeta {
                    durability: Durability::Durable,
                    ..b.meta.clone()
                })
            })
            .collect();
        edits.extend(Self::delete_edits(plan));
        self.commit(edits)?;
        crash::hit(CrashPoint::SyncCommitted);
        for m in plan.all_inputs() {
            self.vfs.delete(&sst_file_name(m.file_id))?;
        }
        Ok(())
    }

    fn commit_async(&self, plan: &CompactionPlan, epoch: EpochId, outputs: Vec<BuiltSst>) -> Result<()> {
        if outputs.is_empty() {
            // Everything was dropped; there is nothing to make durable.
            self.commit(Self::delete_edits(plan).collect())?;
            for m in plan.all_inputs() {
                self.vfs.delete(&sst_file_name(m.file_id))?;
            }
            return Ok(());
        }
        let files: Vec<Arc<VfsFile>> = outputs.iter().map(|b| b.file.clone()).collect();
        let batch = self.ledger_q.submit(IoOp::FsyncBatch { files: files.clone() })?;
        self.schedule.record(EventKind::FsyncSubmitted, epoch);
        crash::hit(CrashPoint::CompactionFsyncSubmitted);
        self.with_ledger(|l, h| l.checkup_begin(h))?;
        crash::hit(CrashPoint::CompactionCheckedUp);

        let offspring: Vec<SstMeta> = outputs.into_iter().map(|b| b.meta).collect();
        let record = LedgerRecord {
            epoch,
            parents: plan.all_inputs().cloned().collect(),
            offspring: offspring.clone(),
            is_bottom: plan.is_bottom,
            target_size: self.config.sst_target_size,
            block_size: self.config.block_size as u32,
        };
        let mut edits: Vec<Edit> = offspring.iter().cloned().map(Edit::AddFile).collect();
        edits.extend(Self::delete_edits(plan));
        edits.push(Edit::LedgerOpen(record));
        let mut lc = self.ledger.lock();
        self.commit(edits)?;
        lc.epoch_files.insert(epoch, files);
        lc.batch_epoch.insert(batch, epoch);
        lc.ledger.open(
            epoch,
            plan.all_inputs().map(|m| m.file_id).collect(),
            offspring.iter().map(|m| m.file_id).collect(),
            Some(batch),
            Instant::now(),
        );
        drop(lc);
        crash::hit(CrashPoint::CompactionCommitted);
        Ok(())
    }

    fn trivial_move(&self, plan: &CompactionPlan) -> Result<()> {
        let id = plan.inputs[0].file_id;
        let mut v = self.versions.lock();
        // Re-read under the lock: the ledger may have marked it durable.
        let meta = v
            .state()
            .find(id)
            .cloned()
            .ok_or_else(|| Error::corrupt(format!("moved file {id} is not live")))?;
        v.log_and_apply(vec![
            Edit::DeleteFile {
                file_id: id,
                level: meta.level,
            },
            Edit::AddFile(SstMeta {
                level: plan.output_level,
                ..meta
            }),
        ])?;
        self.install(v.current());
        drop(v);
        self.counters.trivial_moves.fetch_add(1, Ordering::Relaxed);
        self.schedule.record(EventKind::TrivialMove, 0);
        Ok(())
    }
}
