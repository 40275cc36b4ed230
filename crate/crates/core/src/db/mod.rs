//! The storage engine: write path, read path and background workers.
//!
//! Threads: foreground writers, one flush worker, `compaction_threads`
//! compaction workers and an optional sweep timer. Lock order is
//! `write -> versions` and `ledger -> versions -> current`; `sched` is
//! only ever held around `current`.

mod build;
mod compact;
mod recovery;

pub use recovery::RecoveryReport;

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, MutexGuard, RwLock};

use crate::compaction::{level_scores, Cursors};
use crate::config::{CompactionMode, EngineConfig};
use crate::crash::{self, CrashPoint};
use crate::error::{Error, Result};
use crate::io::{BackendParams, FaultSpec, IoEngine, IoQueue, ReqId, Vfs, VfsFile};
use crate::ledger::{EntrySummary, Ledger};
use crate::manifest::Edit;
use crate::memtable::{Lookup, MemTable};
use crate::metrics::{Counters, EventKind, LevelSummary, MetricsReport, ScheduleEvent, ScheduleLog, StallTracker};
use crate::sstable::{BoxedIter, BufferPool, MergeIterator, RecordIter};
use crate::types::{sst_file_name, wal_file_name, Durability, EpochId, FileId, KvRecord, SeqNo, SstMeta, MAX_SEQNO};
use crate::version::{Version, VersionSet};
use crate::wal::WalWriter;

struct WriteState {
    wal: WalWriter,
    seqno: SeqNo,
}

struct MemSet {
    active: Arc<MemTable>,
    /// Oldest first.
    imm: VecDeque<Arc<MemTable>>,
}

#[derive(Default)]
struct Sched {
    busy: HashSet<FileId>,
    cursors: Cursors,
    running: usize,
}

pub(crate) struct LedgerCore {
    ledger: Ledger,
    epoch_files: HashMap<EpochId, Vec<Arc<VfsFile>>>,
    batch_epoch: HashMap<ReqId, EpochId>,
}

pub(crate) struct Inner {
    config: EngineConfig,
    vfs: Arc<Vfs>,
    io: IoEngine,
    write: Mutex<WriteState>,
    write_cv: Condvar,
    mems: RwLock<MemSet>,
    versions: Mutex<VersionSet>,
    current: RwLock<Arc<Version>>,
    l0_files: AtomicUsize,
    sched: Mutex<Sched>,
    work_cv: Condvar,
    ledger: Mutex<LedgerCore>,
    ledger_q: IoQueue,
    pool: Arc<BufferPool>,
    stall: StallTracker,
    schedule: ScheduleLog,
    counters: Counters,
    shutdown: AtomicBool,
    bg_error: Mutex<Option<String>>,
    visible_seqno: Arc<AtomicU64>,
    flushed_seqno: Arc<AtomicU64>,
    aborted_jobs: AtomicU64,
}

/// Sequence numbers readable without locks, e.g. from a power-loss hook.
#[derive(Clone)]
pub struct SeqnoProbe {
    visible: Arc<AtomicU64>,
    flushed: Arc<AtomicU64>,
}

impl SeqnoProbe {
    /// Highest sequence number applied to a memtable.
    pub fn visible(&self) -> SeqNo {
        self.visible.load(Ordering::Acquire)
    }

    /// Highest sequence number contained in a committed level-0 table.
    pub fn flushed(&self) -> SeqNo {
        self.flushed.load(Ordering::Acquire)
    }
}

pub struct Db {
    inner: Arc<Inner>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    closed: AtomicBool,
    recovery: RecoveryReport,
}

impl Db {
    /// Opens (creating if needed) the store in `dir`, recovering whatever a
    /// previous run left behind.
    pub fn open(dir: impl AsRef<Path>, config: EngineConfig) -> Result<Db> {
        config.validate()?;
        let vfs = Vfs::new(dir.as_ref())?;
        let io = IoEngine::new(vfs.clone(), BackendParams::from_config(&config));
        if crash::is_armed() {
            let v = vfs.clone();
            crash::set_power_loss_handler(Some(Arc::new(move || v.power_loss())));
        }
        let pool = BufferPool::new(config.merge_buffer_size as usize);
        let rec = recovery::recover(&vfs, &io, &pool, &config)?;
        let wal = WalWriter::create(vfs.clone(), rec.wal_segment, config.wal_fsync_each_write)?;
        let last = rec.report.last_seqno;
        let current = rec.versions.current();
        let start = Instant::now();
        let inner = Arc::new(Inner {
            ledger_q: io.queue(4096),
            l0_files: AtomicUsize::new(current.level(0).len()),
            current: RwLock::new(current),
            mems: RwLock::new(MemSet {
                active: Arc::new(MemTable::new(rec.wal_segment)),
                imm: VecDeque::new(),
            }),
            versions: Mutex::new(rec.versions),
            write: Mutex::new(WriteState { wal, seqno: last }),
            write_cv: Condvar::new(),
            sched: Mutex::new(Sched {
                cursors: Cursors::new(config.num_levels as usize),
                ..Sched::default()
            }),
            work_cv: Condvar::new(),
            ledger: Mutex::new(LedgerCore {
                ledger: Ledger::default(),
                epoch_files: HashMap::new(),
                batch_epoch: HashMap::new(),
            }),
            pool,
            stall: StallTracker::default(),
            schedule: ScheduleLog::new(start),
            counters: Counters::default(),
            shutdown: AtomicBool::new(false),
            bg_error: Mutex::new(None),
            visible_seqno: Arc::new(AtomicU64::new(last)),
            flushed_seqno: Arc::new(AtomicU64::new(last)),
            aborted_jobs: AtomicU64::new(0),
            vfs,
            io,
            config,
        });
        let mut threads = Vec::new();
        let spawn = |name: String, f: Box<dyn FnOnce() + Send>| {
            std::thread::Builder::new().name(name).spawn(f).map_err(Error::Io)
        };
        let i = inner.clone();
        threads.push(spawn("flush".into(), Box::new(move || i.flush_loop()))?);
        for n in 0..inner.config.compaction_threads {
            let i = inner.clone();
            threads.push(spawn(format!("compact-{n}"), Box::new(move || i.compaction_loop()))?);
        }
        if let Some(every) = inner.config.sweep_interval {
            let i = inner.clone();
            threads.push(spawn("sweep".into(), Box::new(move || i.sweep_loop(every)))?);
        }
        Ok(Db {
            inner,
            threads: Mutex::new(threads),
            closed: AtomicBool::new(false),
            recovery: rec.report,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.config
    }

    pub fn recovery_report(&self) -> &RecoveryReport {
        &self.recovery
    }

    pub fn vfs(&self) -> &Arc<Vfs> {
        &self.inner.vfs
    }

    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<()> {
        if value.len() > self.inner.config.max_value_size {
            return Err(Error::ValueTooLarge {
                size: value.len(),
                limit: self.inner.config.max_value_size,
            });
        }
        self.inner.write(|seqno| KvRecord::put(key, seqno, value))
    }

    pub fn delete(&self, key: &[u8]) -> Result<()> {
        self.inner.write(|seqno| KvRecord::delete(key, seqno))
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        self.inner.check_error()?;
        let (active, imm) = self.inner.memtables();
        for m in std::iter::once(&active).chain(imm.iter().rev()) {
            if let Some(l) = m.get(key, MAX_SEQNO) {
                return Ok(into_value(l));
            }
        }
        let v = self.inner.current.read().clone();
        Ok(v.get(key, MAX_SEQNO)?.and_then(into_value))
    }

    /// Iterates live records with `start <= key < end` as of now.
    pub fn iter(&self, start: Option<&[u8]>, end: Option<&[u8]>) -> Result<DbIter> {
        self.inner.check_error()?;
        let snapshot = self.inner.visible_seqno.load(Ordering::Acquire);
        let (active, imm) = self.inner.memtables();
        let version = self.inner.current.read().clone();
        let mut sources: Vec<BoxedIter> = Vec::new();
        for m in std::iter::once(&active).chain(imm.iter().rev()) {
            sources.push(Box::new(m.iter()));
        }
        sources.extend(version.iters(start));
        let sources = sources
            .into_iter()
            .map(|s| {
                Box::new(Bounded {
                    inner: s,
                    snapshot,
                    start: start.map(|s| s.to_vec()),
                }) as BoxedIter
            })
            .collect();
        Ok(DbIter {
            merge: MergeIterator::new(sources, true),
            end: end.map(|e| e.to_vec()),
            done: false,
        })
    }

    /// Collects every live record in key order.
    pub fn scan(&self) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        self.iter(None, None)?.collect()
    }

    pub fn last_seqno(&self) -> SeqNo {
        self.inner.visible_seqno.load(Ordering::Acquire)
    }

    pub fn flushed_seqno(&self) -> SeqNo {
        self.inner.flushed_seqno.load(Ordering::Acquire)
    }

    pub fn seqno_probe(&self) -> SeqnoProbe {
        SeqnoProbe {
            visible: self.inner.visible_seqno.clone(),
            flushed: self.inner.flushed_seqno.clone(),
        }
    }

    /// Rotates the active memtable and waits until every memtable is in
    /// level 0.
    pub fn flush(&self) -> Result<()> {
        {
            let mut w = self.inner.write.lock();
            if !self.inner.mems.read().active.is_empty() {
                self.inner.switch_memtable(&mut w)?;
            }
        }
        self.inner.wait_until(|| self.inner.mems.read().imm.is_empty())
    }

    /// Waits until no flush or compaction is due or running.
    pub fn wait_idle(&self) -> Result<()> {
        let inner = &self.inner;
        inner.wait_until(|| {
            if !inner.mems.read().imm.is_empty() || inner.sched.lock().running > 0 {
                return false;
            }
            let v = inner.current.read().clone();
            let levels = v.metas();
            level_scores(&levels, &inner.config).iter().all(|s| *s < 1.0)
        })
    }

    /// Runs the outlier sweep now with the configured age limit.
    pub fn sweep_now(&self) -> Result<Vec<EpochId>> {
        self.sweep_with(self.inner.config.outlier_max_age)
    }

    pub fn sweep_with(&self, max_age: Duration) -> Result<Vec<EpochId>> {
        self.inner.with_ledger(|l, h| l.sweep(h, Instant::now(), max_age))
    }

    pub fn ledger_summary(&self) -> Vec<EntrySummary> {
        self.inner.ledger.lock().ledger.summary(Instant::now())
    }

    pub fn schedule(&self) -> Vec<ScheduleEvent> {
        self.inner.schedule.snapshot()
    }

    /// Files of the current version, level by level.
    pub fn levels(&self) -> Vec<Vec<SstMeta>> {
        self.inner.current.read().metas()
    }

    pub fn volatile_files(&self) -> Vec<FileId> {
        self.inner.current.read().volatile_files()
    }

    /// Makes the next matching device operations fail.
    pub fn inject_fault(&self, spec: FaultSpec) {
        self.inner.io.inject_fault(spec);
    }

    pub fn aborted_jobs(&self) -> u64 {
        self.inner.aborted_jobs.load(Ordering::Relaxed)
    }

    pub fn metrics(&self) -> MetricsReport {
        let inner = &self.inner;
        let (stats, open) = {
            let l = inner.ledger.lock();
            (l.ledger.stats().clone(), l.ledger.len())
        };
        let v = inner.current.read().clone();
        let levels = (0..v.num_levels())
            .map(|n| LevelSummary {
                level: n,
                files: v.level(n).len(),
                bytes: v.level_bytes(n),
                volatile_files: v
                    .level(n)
                    .iter()
                    .filter(|t| t.meta.durability == Durability::Volatile)
                    .count(),
            })
            .collect();
        inner.counters.report(&inner.stall, stats, open, levels)
    }

    /// Flushes memtables, stops background work, retires every open epoch
    /// and checks that no volatile file remains.
    pub fn close(self) -> Result<()> {
        self.flush()?;
        self.stop_threads();
        self.inner.check_error()?;
        self.inner.with_ledger(|l, h| l.retire_all(h))?;
        self.closed.store(true, Ordering::Release);
        let volatile = self.inner.current.read().volatile_files();
        if !volatile.is_empty() {
            return Err(Error::corrupt(format!("volatile files after close: {volatile:?}")));
        }
        self.inner.write.lock().wal.sync()?;
        Ok(())
    }

    fn stop_threads(&self) {
        self.inner.shutdown.store(true, Ordering::Release);
        self.inner.work_cv.notify_all();
        self.inner.write_cv.notify_all();
        for t in self.threads.lock().drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Db {
    fn drop(&mut self) {
        if !self.closed.load(Ordering::Acquire) {
            self.stop_threads();
        }
    }
}

fn into_value(l: Lookup) -> Option<Vec<u8>> {
    match l {
        Lookup::Found(v) => Some(v),
        Lookup::Deleted => None,
    }
}

/// Hides records newer than the snapshot or below the start key.
struct Bounded {
    inner: BoxedIter,
    snapshot: SeqNo,
    start: Option<Vec<u8>>,
}

impl RecordIter for Bounded {
    fn next_record(&mut self) -> Result<Option<KvRecord>> {
        while let Some(r) = self.inner.next_record()? {
            if r.key.seqno > self.snapshot {
                continue;
            }
            if let Some(s) = &self.start {
                if r.key.user_key < *s {
                    continue;
                }
            }
            return Ok(Some(r));
        }
        Ok(None)
    }
}

pub struct DbIter {
    merge: MergeIterator,
    end: Option<Vec<u8>>,
    done: bool,
}

impl Iterator for DbIter {
    type Item = Result<(Vec<u8>, Vec<u8>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.merge.next_record() {
            Ok(Some(r)) => {
                if self.end.as_ref().is_some_and(|e| r.key.user_key >= *e) {
                    self.done = true;
                    return None;
                }
                Some(Ok((r.key.user_key, r.value)))
            }
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

impl Version {
    fn metas(&self) -> Vec<Vec<SstMeta>> {
        (0..self.num_levels())
            .map(|n| self.level(n).iter().map(|t| t.meta.clone()).collect())
            .collect()
    }
}

impl Inner {
    fn check_error(&self) -> Result<()> {
        match &*self.bg_error.lock() {
            Some(e) => Err(Error::Background(e.clone())),
            None => Ok(()),
        }
    }

    fn set_error(&self, e: &Error) {
        tracing::error!(error = %e, "background failure");
        self.bg_error.lock().get_or_insert_with(|| e.to_string());
        self.write_cv.notify_all();
    }

    fn memtables(&self) -> (Arc<MemTable>, Vec<Arc<MemTable>>) {
        let m = self.mems.read();
        (m.active.clone(), m.imm.iter().cloned().collect())
    }

    fn install(&self, v: Arc<Version>) {
        self.l0_files.store(v.level(0).len(), Ordering::Release);
        *self.current.write() = v;
        self.write_cv.notify_all();
        self.work_cv.notify_all();
    }

    /// Applies edits to the MANIFEST and publishes the new version.
    fn commit(&self, edits: Vec<Edit>) -> Result<()> {
        let mut v = self.versions.lock();
        v.log_and_apply(edits)?;
        self.install(v.current());
        Ok(())
    }

    fn wait_until(&self, mut done: impl FnMut() -> bool) -> Result<()> {
        loop {
            self.check_error()?;
            if done() {
                return Ok(());
            }
            let mut s = self.sched.lock();
            self.work_cv.wait_for(&mut s, Duration::from_millis(5));
        }
    }

    fn write(&self, make: impl FnOnce(SeqNo) -> KvRecord) -> Result<()> {
        let mut w = self.write.lock();
        self.check_error()?;
        self.make_room(&mut w)?;
        let seqno = w.seqno + 1;
        let rec = make(seqno);
        let user = (rec.key.user_key.len() + rec.value.len()) as u64;
        let n = w.wal.append_record(&rec)?;
        self.mems.read().active.insert(rec);
        w.seqno = seqno;
        self.visible_seqno.store(seqno, Ordering::Release);
        self.counters.wal_bytes.fetch_add(n as u64, Ordering::Relaxed);
        self.counters.user_bytes.fetch_add(user, Ordering::Relaxed);
        Ok(())
    }

    /// Stalls while the flush or level-0 backlog is over its limit and
    /// rotates a full memtable.
    fn make_room(&self, w: &mut MutexGuard<'_, WriteState>) -> Result<()> {
        let mut stalled = false;
        let res = loop {
            if let Err(e) = self.check_error() {
                break Err(e);
            }
            let l0 = self.l0_files.load(Ordering::Acquire);
            let (full, imm) = {
                let m = self.mems.read();
                (
                    m.active.approximate_bytes() as u64 >= self.config.memtable_limit,
                    m.imm.len(),
                )
            };
            let stall = l0 > self.config.l0_stall_threshold()
                || (full && imm >= self.config.max_immutable_memtables);
            if stall && !self.shutdown.load(Ordering::Acquire) {
                if !stalled {
                    self.stall.begin();
                    stalled = true;
                }
                self.write_cv.wait_for(w, Duration::from_millis(5));
                continue;
            }
            if full {
                if let Err(e) = self.switch_memtable(w) {
                    break Err(e);
                }
            }
            break Ok(());
        };
        if stalled {
            self.stall.end();
        }
        res
    }

    fn switch_memtable(&self, w: &mut WriteState) -> Result<()> {
        let seg = self.versions.lock().new_file_id();
        w.wal = WalWriter::create(self.vfs.clone(), seg, self.config.wal_fsync_each_write)?;
        {
            let mut m = self.mems.write();
            let old = std::mem::replace(&mut m.active, Arc::new(MemTable::new(seg)));
            old.freeze();
            m.imm.push_back(old);
        }
        self.work_cv.notify_all();
        Ok(())
    }

    fn flush_loop(&self) {
        const MAX_ATTEMPTS: u32 = 4;
        let queue = self.io.queue(self.config.io_queue_depth);
        let mut failures = 0;
        loop {
            let next = self.mems.read().imm.front().cloned();
            match next {
                Some(mem) => match self.flush_one(&queue, &mem) {
                    Ok(()) => failures = 0,
                    Err(e) if compact::is_recoverable(&e) && failures + 1 < MAX_ATTEMPTS => {
                        failures += 1;
                        tracing::warn!(error = %e, "flush failed, retrying");
                        std::thread::sleep(Duration::from_millis(10));
                    }
                    Err(e) => {
                        self.set_error(&e);
                        return;
                    }
                },
                None => {
                    if self.shutdown.load(Ordering::Acquire) {
                        return;
                    }
                    let mut s = self.sched.lock();
                    self.work_cv.wait_for(&mut s, Duration::from_millis(20));
                }
            }
        }
    }

    fn flush_one(&self, queue: &IoQueue, mem: &Arc<MemTable>) -> Result<()> {
        let file_id = self.versions.lock().new_file_id();
        let built = build::write_l0(
            &self.vfs,
            queue,
            &self.pool,
            self.config.block_size as usize,
            self.config.merge_buffer_size as usize,
            mem,
            file_id,
        )
        .inspect_err(|_| {
            let _ = self.vfs.delete(&sst_file_name(file_id));
        })?;
        let next_segment = {
            let m = self.mems.read();
            m.imm.get(1).unwrap_or(&m.active).wal_segment()
        };
        let mut edits = vec![Edit::LastSeqno(mem.max_seqno()), Edit::LogNumber(next_segment)];
        if let Some(b) = &built {
            edits.push(Edit::AddFile(SstMeta {
                durability: Durability::Durable,
                ..b.meta.clone()
            }));
        }
        self.commit(edits)?;
        crash::hit(CrashPoint::FlushCommitted);
        self.mems.write().imm.pop_front();
        self.vfs.delete(&wal_file_name(mem.wal_segment()))?;
        self.flushed_seqno.fetch_max(mem.max_seqno(), Ordering::AcqRel);
        if let Some(b) = built {
            self.counters.flush_bytes.fetch_add(b.meta.file_size, Ordering::Relaxed);
        }
        self.counters.flushes.fetch_add(1, Ordering::Relaxed);
        self.schedule.record(EventKind::FlushCommitted, 0);
        self.write_cv.notify_all();
        self.work_cv.notify_all();
        Ok(())
    }

    fn sweep_loop(&self, every: Duration) {
        let mut next = Instant::now() + every;
        while !self.shutdown.load(Ordering::Acquire) {
            let now = Instant::now();
            if now < next {
                let mut s = self.sched.lock();
                self.work_cv.wait_for(&mut s, (next - now).min(Duration::from_millis(50)));
                continue;
            }
            next = now + every;
            let max_age = self.config.outlier_max_age;
            if let Err(e) = self.with_ledger(|l, h| l.sweep(h, Instant::now(), max_age)) {
                self.set_error(&e);
                return;
            }
        }
    }

    fn compaction_mode(&self) -> CompactionMode {
        self.config.compaction_mode
    }
}
