//! Submission/completion I/O engine.
//!
//! An [`IoEngine`] owns one backend and hands out [`IoQueue`]s. Each queue
//! is an independent submission/completion pair: completions of requests
//! submitted on a queue are only ever delivered to that queue, exactly once,
//! either through [`IoQueue::wait_all`] or [`IoQueue::poll_completions`].
//!
//! Backends:
//! - `Sync`: the request runs inside `submit`.
//! - `Async`: requests run on worker lanes; a file always maps to the same
//!   lane so its requests execute in submission order.
//! - `SimulatedLatency`: the file operation runs inside `submit` but the
//!   completion (and, for fsync, the durability it confirms) is released by
//!   a timer after the configured latency.

mod fs;

pub use fs::{Vfs, VfsFile};

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Sender};
use parking_lot::{Condvar, Mutex, RwLock};

use crate::config::{EngineConfig, IoBackendKind, MIB};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ReqId(pub u64);

pub enum IoOp {
    Write {
        file: Arc<VfsFile>,
        offset: u64,
        buf: Vec<u8>,
    },
    Fsync {
        file: Arc<VfsFile>,
    },
    /// One request persisting several files; completes when all of them are
    /// durable, or with the first error.
    FsyncBatch {
        files: Vec<Arc<VfsFile>>,
    },
}

impl IoOp {
    fn kind(&self) -> &'static str {
        match self {
            IoOp::Write { .. } => "write",
            IoOp::Fsync { .. } => "fsync",
            IoOp::FsyncBatch { .. } => "fsync-batch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IoStatus {
    Ok,
    IoError { code: i32, message: String },
}

impl IoStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, IoStatus::Ok)
    }

    fn from_io(e: &std::io::Error) -> Self {
        IoStatus::IoError {
            code: e.raw_os_error().unwrap_or(-1),
            message: e.to_string(),
        }
    }

    pub fn into_result(self) -> Result<()> {
        match self {
            IoStatus::Ok => Ok(()),
            IoStatus::IoError { code, message } => Err(Error::AsyncIo { code, message }),
        }
    }
}

pub struct CompletionEvent {
    pub req_id: ReqId,
    pub status: IoStatus,
    pub submit_time: Instant,
    pub complete_time: Instant,
    /// The write buffer, handed back for reuse.
    pub buffer: Option<Vec<u8>>,
}

impl fmt::Debug for CompletionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompletionEvent")
            .field("req_id", &self.req_id)
            .field("status", &self.status)
            .field("latency", &(self.complete_time - self.submit_time))
            .finish()
    }
}

#[derive(Debug, Default)]
pub struct WaitOutcome {
    pub events: Vec<CompletionEvent>,
    /// Requests still outstanding when the timeout expired.
    pub incomplete: Vec<ReqId>,
}

impl WaitOutcome {
    pub fn is_complete(&self) -> bool {
        self.incomplete.is_empty()
    }

    /// First failed status among the harvested events.
    pub fn first_error(&self) -> Option<&IoStatus> {
        self.events.iter().map(|e| &e.status).find(|s| !s.is_ok())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendParams {
    pub kind: IoBackendKind,
    pub sim_write_latency_per_mib: Duration,
    pub sim_fsync_latency: Duration,
    pub direct_io_poll: bool,
    pub workers: usize,
}

impl BackendParams {
    pub fn from_config(cfg: &EngineConfig) -> Self {
        BackendParams {
            kind: cfg.io_backend,
            sim_write_latency_per_mib: cfg.sim_write_latency_per_mib,
            sim_fsync_latency: cfg.sim_fsync_latency,
            direct_io_poll: cfg.direct_io_poll,
            workers: cfg.io_workers,
        }
    }

    pub fn sync() -> Self {
        BackendParams {
            kind: IoBackendKind::Sync,
            sim_write_latency_per_mib: Duration::ZERO,
            sim_fsync_latency: Duration::ZERO,
            direct_io_poll: false,
            workers: 1,
        }
    }

    pub fn simulated(write_per_mib: Duration, fsync: Duration) -> Self {
        BackendParams {
            kind: IoBackendKind::SimulatedLatency,
            sim_write_latency_per_mib: write_per_mib,
            sim_fsync_latency: fsync,
            ..BackendParams::sync()
        }
    }

    pub fn host_async(workers: usize) -> Self {
        BackendParams {
            kind: IoBackendKind::Async,
            workers: workers.max(1),
            ..BackendParams::sync()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultOp {
    Write,
    /// Any fsync, alone or as part of a batch.
    Fsync,
    /// A whole `FsyncBatch` request; each occurrence fails one batch.
    BatchFsync,
}

/// Makes the next `times` matching operations fail with EIO.
#[derive(Debug, Clone)]
pub struct FaultSpec {
    pub op: FaultOp,
    /// Matches files whose name contains this string; `None` matches all.
    pub file_pattern: Option<String>,
    pub times: u32,
}

const EIO: i32 = 5;

struct Faults {
    specs: Mutex<Vec<FaultSpec>>,
    armed: AtomicBool,
}

impl Faults {
    /// One check per batch request, matching if any member matches.
    fn check_batch(&self, files: &[Arc<VfsFile>]) -> Option<IoStatus> {
        if !self.armed.load(Ordering::Acquire) {
            return None;
        }
        files.iter().find_map(|f| self.check(FaultOp::BatchFsync, f))
    }

    fn check(&self, op: FaultOp, file: &VfsFile) -> Option<IoStatus> {
        if !self.armed.load(Ordering::Acquire) {
            return None;
        }
        let mut specs = self.specs.lock();
        let pos = specs.iter().position(|s| {
            s.op == op
                && s.times > 0
                && s.file_pattern
                    .as_deref()
                    .map_or(true, |p| file.name().contains(p))
        })?;
        specs[pos].times -= 1;
        if specs[pos].times == 0 {
            specs.remove(pos);
        }
        if specs.is_empty() {
            self.armed.store(false, Ordering::Release);
        }
        Some(IoStatus::IoError {
            code: EIO,
            message: format!("injected {op:?} failure on {}", file.name()),
        })
    }
}

struct CqState {
    ready: BTreeMap<ReqId, CompletionEvent>,
    /// Submitted and not yet harvested.
    outstanding: HashSet<ReqId>,
    /// Submitted and not yet completed.
    pending: usize,
}

struct Cq {
    state: Mutex<CqState>,
    cond: Condvar,
}

struct Delivery {
    cq: Arc<Cq>,
    in_flight: Arc<AtomicUsize>,
    req_id: ReqId,
    submit_time: Instant,
}

impl Delivery {
    fn complete(self, status: IoStatus, buffer: Option<Vec<u8>>) {
        let ev = CompletionEvent {
            req_id: self.req_id,
            status,
            submit_time: self.submit_time,
            complete_time: Instant::now(),
            buffer,
        };
        {
            let mut st = self.cq.state.lock();
            st.pending -= 1;
            st.ready.insert(self.req_id, ev);
        }
        self.in_flight.fetch_sub(1, Ordering::AcqRel);
        self.cq.cond.notify_all();
    }
}

type Task = Box<dyn FnOnce() + Send>;

struct Pool {
    lanes: Vec<Sender<Task>>,
    threads: Vec<JoinHandle<()>>,
}

impl Pool {
    fn new(workers: usize) -> Self {
        let mut lanes = Vec::new();
        let mut threads = Vec::new();
        for i in 0..workers.max(1) {
            let (tx, rx) = unbounded::<Task>();
            lanes.push(tx);
            threads.push(
                std::thread::Builder::new()
                    .name(format!("io-lane-{i}"))
                    .spawn(move || {
                        for task in rx {
                            task();
                        }
                    })
                    .expect("spawn io lane"),
            );
        }
        Pool { lanes, threads }
    }

    fn lane(&self, file: &VfsFile) -> &Sender<Task> {
        &self.lanes[(file.handle() as usize) % self.lanes.len()]
    }

    fn shutdown(&mut self) {
        self.lanes.clear();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

struct TimerEntry {
    deadline: Instant,
    seq: u64,
    task: Task,
}

impl PartialEq for TimerEntry {
    fn eq(&self, other: &Self) -> bool {
        (self.deadline, self.seq) == (other.deadline, other.seq)
    }
}
impl Eq for TimerEntry {}
impl PartialOrd for TimerEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TimerEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.deadline, self.seq).cmp(&(other.deadline, other.seq))
    }
}

struct TimerState {
    heap: BinaryHeap<Reverse<TimerEntry>>,
    stop: bool,
    seq: u64,
}

struct Timer {
    state: Mutex<TimerState>,
    cond: Condvar,
}

impl Timer {
    fn schedule(&self, deadline: Instant, task: Task) {
        let mut st = self.state.lock();
        st.seq += 1;
        let seq = st.seq;
        st.heap.push(Reverse(TimerEntry {
            deadline,
            seq,
            task,
        }));
        drop(st);
        self.cond.notify_all();
    }

    fn run(&self) {
        let mut st = self.state.lock();
        loop {
            if st.stop && st.heap.is_empty() {
                return;
            }
            let now = Instant::now();
            match st.heap.peek() {
                Some(Reverse(top)) if top.deadline <= now || st.stop => {
                    let Reverse(entry) = st.heap.pop().unwrap();
                    drop(st);
                    (entry.task)();
                    st = self.state.lock();
                }
                Some(Reverse(top)) => {
                    let wait = top.deadline - now;
                    self.cond.wait_for(&mut st, wait);
                }
                None => self.cond.wait(&mut st),
            }
        }
    }
}

struct SimDevice {
    write_per_mib: Duration,
    fsync: Duration,
    timer: Arc<Timer>,
    /// Completion deadlines are monotone per file.
    last_deadline: Mutex<HashMap<u64, Instant>>,
    thread: Option<JoinHandle<()>>,
}

impl SimDevice {
    fn new(write_per_mib: Duration, fsync: Duration) -> Self {
        let timer = Arc::new(Timer {
            state: Mutex::new(TimerState {
                heap: BinaryHeap::new(),
                stop: false,
                seq: 0,
            }),
            cond: Condvar::new(),
        });
        let t = timer.clone();
        let thread = std::thread::Builder::new()
            .name("io-sim-timer".into())
            .spawn(move || t.run())
            .expect("spawn sim timer");
        SimDevice {
            write_per_mib,
            fsync,
            timer,
            last_deadline: Mutex::new(HashMap::new()),
            thread: Some(thread),
        }
    }

    fn deadline_for(&self, files: &[&VfsFile], latency: Duration) -> Instant {
        let base = Instant::now() + latency;
        let mut last = self.last_deadline.lock();
        let mut deadline = base;
        for f in files {
            if let Some(prev) = last.get(&f.handle()) {
                deadline = deadline.max(*prev);
            }
        }
        for f in files {
            last.insert(f.handle(), deadline);
        }
        deadline
    }

    fn write_latency(&self, bytes: usize) -> Duration {
        self.write_per_mib.mul_f64(bytes as f64 / MIB as f64)
    }

    fn shutdown(&mut self) {
        self.timer.state.lock().stop = true;
        self.timer.cond.notify_all();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

enum Backend {
    Sync,
    Pool(Pool),
    Sim(SimDevice),
}

impl Backend {
    fn build(params: &BackendParams) -> Self {
        match params.kind {
            IoBackendKind::Sync => Backend::Sync,
            IoBackendKind::Async => Backend::Pool(Pool::new(params.workers)),
            IoBackendKind::SimulatedLatency => Backend::Sim(SimDevice::new(
                params.sim_write_latency_per_mib,
                params.sim_fsync_latency,
            )),
        }
    }

    fn shutdown(&mut self) {
        match self {
            Backend::Sync => {}
            Backend::Pool(p) => p.shutdown(),
            Backend::Sim(s) => s.shutdown(),
        }
    }
}

struct Shared {
    vfs: Arc<Vfs>,
    backend: RwLock<(BackendParams, Backend)>,
    in_flight: Arc<AtomicUsize>,
    next_id: AtomicU64,
    faults: Arc<Faults>,
}

/// Owner of the I/O backend. Dropping it drains and stops backend threads.
pub struct IoEngine {
    shared: Arc<Shared>,
}

impl IoEngine {
    pub fn new(vfs: Arc<Vfs>, params: BackendParams) -> Self {
        vfs.set_real_sync(params.kind != IoBackendKind::SimulatedLatency);
        let backend = Backend::build(&params);
        IoEngine {
            shared: Arc::new(Shared {
                vfs,
                backend: RwLock::new((params, backend)),
                in_flight: Arc::new(AtomicUsize::new(0)),
                next_id: AtomicU64::new(1),
                faults: Arc::new(Faults {
                    specs: Mutex::new(Vec::new()),
                    armed: AtomicBool::new(false),
                }),
            }),
        }
    }

    pub fn vfs(&self) -> &Arc<Vfs> {
        &self.shared.vfs
    }

    /// Opens a new submission/completion queue with the given depth.
    pub fn queue(&self, depth: usize) -> IoQueue {
        IoQueue {
            shared: self.shared.clone(),
            cq: Arc::new(Cq {
                state: Mutex::new(CqState {
                    ready: BTreeMap::new(),
                    outstanding: HashSet::new(),
                    pending: 0,
                }),
                cond: Condvar::new(),
            }),
            depth: depth.max(1),
        }
    }

    pub fn in_flight(&self) -> usize {
        self.shared.in_flight.load(Ordering::Acquire)
    }

    pub fn params(&self) -> BackendParams {
        self.shared.backend.read().0.clone()
    }

    /// Switches backend. Fails while any request is in flight.
    pub fn set_backend(&self, params: BackendParams) -> Result<()> {
        let mut guard = self.shared.backend.write();
        let n = self.in_flight();
        if n > 0 {
            return Err(Error::InFlight(n));
        }
        guard.1.shutdown();
        self.shared
            .vfs
            .set_real_sync(params.kind != IoBackendKind::SimulatedLatency);
        guard.1 = Backend::build(&params);
        guard.0 = params;
        Ok(())
    }

    pub fn inject_fault(&self, spec: FaultSpec) {
        self.shared.faults.specs.lock().push(spec);
        self.shared.faults.armed.store(true, Ordering::Release);
    }
}

impl Drop for IoEngine {
    fn drop(&mut self) {
        self.shared.backend.write().1.shutdown();
    }
}

fn exec_write(vfs: &Vfs, faults: &Faults, file: &VfsFile, offset: u64, buf: &[u8]) -> IoStatus {
    if let Some(st) = faults.check(FaultOp::Write, file) {
        return st;
    }
    match vfs.write_at(file, offset, buf) {
        Ok(()) => IoStatus::Ok,
        Err(e) => IoStatus::from_io(&e),
    }
}

/// Member fsync of a batch; `forced` fails every member of a batch hit by
/// a [`FaultOp::BatchFsync`] fault.
fn exec_sync_batch(
    vfs: &Vfs,
    faults: &Faults,
    file: &VfsFile,
    forced: &Option<IoStatus>,
) -> std::result::Result<u64, IoStatus> {
    if let Some(st) = forced {
        return Err(st.clone());
    }
    exec_sync(vfs, faults, file)
}

/// Runs the fsync; on success returns the length it made durable.
fn exec_sync(vfs: &Vfs, faults: &Faults, file: &VfsFile) -> std::result::Result<u64, IoStatus> {
    if let Some(st) = faults.check(FaultOp::Fsync, file) {
        return Err(st);
    }
    let snap = vfs.sync_snapshot(file);
    match vfs.sync_data(file) {
        Ok(()) => Ok(snap),
        Err(e) => Err(IoStatus::from_io(&e)),
    }
}

/// A submission/completion queue bound to an [`IoEngine`].
pub struct IoQueue {
    shared: Arc<Shared>,
    cq: Arc<Cq>,
    depth: usize,
}

impl IoQueue {
    /// Enqueues a request. Returns [`Error::QueueFull`] when `depth`
    /// requests are already pending; the caller must harvest completions
    /// before retrying.
    pub fn submit(&self, op: IoOp) -> Result<ReqId> {
        let req_id = ReqId(self.shared.next_id.fetch_add(1, Ordering::Relaxed));
        {
            let mut st = self.cq.state.lock();
            if st.pending >= self.depth {
                return Err(Error::QueueFull { depth: self.depth });
            }
            st.pending += 1;
            st.outstanding.insert(req_id);
        }
        self.shared.in_flight.fetch_add(1, Ordering::AcqRel);
        let delivery = Delivery {
            cq: self.cq.clone(),
            in_flight: self.shared.in_flight.clone(),
            req_id,
            submit_time: Instant::now(),
        };
        tracing::trace!(req = req_id.0, op = op.kind(), "submit");
        let backend = self.shared.backend.read();
        let vfs = self.shared.vfs.clone();
        let faults = self.shared.faults.clone();
        let forced = match &op {
            IoOp::FsyncBatch { files } => faults.check_batch(files),
            _ => None,
        };
        match &backend.1 {
            Backend::Sync => match op {
                IoOp::Write { file, offset, buf } => {
                    let st = exec_write(&vfs, &faults, &file, offset, &buf);
                    delivery.complete(st, Some(buf));
                }
                IoOp::Fsync { file } => {
                    let st = match exec_sync(&vfs, &faults, &file) {
                        Ok(len) => {
                            vfs.mark_synced(&file, len);
                            IoStatus::Ok
                        }
                        Err(st) => st,
                    };
                    delivery.complete(st, None);
                }
                IoOp::FsyncBatch { files } => {
                    let mut status = IoStatus::Ok;
                    for f in &files {
                        match exec_sync_batch(&vfs, &faults, f, &forced) {
                            Ok(len) => vfs.mark_synced(f, len),
                            Err(st) => {
                                if status.is_ok() {
                                    status = st;
                                }
                            }
                        }
                    }
                    delivery.complete(status, None);
                }
            },
            Backend::Pool(pool) => match op {
                IoOp::Write { file, offset, buf } => {
                    let lane = pool.lane(&file).clone();
                    let _ = lane.send(Box::new(move || {
                        let st = exec_write(&vfs, &faults, &file, offset, &buf);
                        delivery.complete(st, Some(buf));
                    }));
                }
                IoOp::Fsync { file } => {
                    let lane = pool.lane(&file).clone();
                    let _ = lane.send(Box::new(move || {
                        let st = match exec_sync(&vfs, &faults, &file) {
                            Ok(len) => {
                                vfs.mark_synced(&file, len);
                                IoStatus::Ok
                            }
                            Err(st) => st,
                        };
                        delivery.complete(st, None);
                    }));
                }
                IoOp::FsyncBatch { files } => {
                    if files.is_empty() {
                        delivery.complete(IoStatus::Ok, None);
                        return Ok(req_id);
                    }
                    struct BatchState {
                        remaining: AtomicUsize,
                        status: Mutex<IoStatus>,
                        delivery: Mutex<Option<Delivery>>,
                    }
                    let state = Arc::new(BatchState {
                        remaining: AtomicUsize::new(files.len()),
                        status: Mutex::new(IoStatus::Ok),
                        delivery: Mutex::new(Some(delivery)),
                    });
                    for f in files {
                        let lane = pool.lane(&f).clone();
                        let state = state.clone();
                        let vfs = vfs.clone();
                        let faults = faults.clone();
                        let forced = forced.clone();
                        let _ = lane.send(Box::new(move || {
                            match exec_sync_batch(&vfs, &faults, &f, &forced) {
                                Ok(len) => vfs.mark_synced(&f, len),
                                Err(st) => {
                                    let mut s = state.status.lock();
                                    if s.is_ok() {
                                        *s = st;
                                    }
                                }
                            }
                            if state.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
                                let status = state.status.lock().clone();
                                if let Some(d) = state.delivery.lock().take() {
                                    d.complete(status, None);
                                }
                            }
                        }));
                    }
                }
            },
            Backend::Sim(dev) => {
                let (deadline, status, buffer, synced) = match op {
                    IoOp::Write { file, offset, buf } => {
                        let st = exec_write(&vfs, &faults, &file, offset, &buf);
                        let d = dev.deadline_for(&[&file], dev.write_latency(buf.len()));
                        (d, st, Some(buf), Vec::new())
                    }
                    IoOp::Fsync { file } => {
                        let d = dev.deadline_for(&[&file], dev.fsync);
                        match exec_sync(&vfs, &faults, &file) {
                            Ok(len) => (d, IoStatus::Ok, None, vec![(file, len)]),
                            Err(st) => (d, st, None, Vec::new()),
                        }
                    }
                    IoOp::FsyncBatch { files } => {
                        // Member fsyncs proceed in parallel on the device.
                        let refs: Vec<&VfsFile> = files.iter().map(|f| f.as_ref()).collect();
                        let d = dev.deadline_for(&refs, dev.fsync);
                        let mut status = IoStatus::Ok;
                        let mut synced = Vec::new();
                        for f in files {
                            match exec_sync_batch(&vfs, &faults, &f, &forced) {
                                Ok(len) => synced.push((f, len)),
                                Err(st) => {
                                    if status.is_ok() {
                                        status = st;
                                    }
                                }
                            }
                        }
                        (d, status, None, synced)
                    }
                };
                let finish = move || {
                    for (f, len) in &synced {
                        vfs.mark_synced(f, *len);
                    }
                    delivery.complete(status, buffer);
                };
                if deadline <= Instant::now() {
                    finish();
                } else {
                    dev.timer.schedule(deadline, Box::new(finish));
                }
            }
        }
        Ok(req_id)
    }

    /// Blocks until every listed request completes or `timeout` elapses.
    /// Harvested events are removed from the queue; ids that were already
    /// harvested are ignored.
    pub fn wait_all(&self, ids: &[ReqId], timeout: Option<Duration>) -> WaitOutcome {
        let deadline = timeout.map(|t| Instant::now() + t);
        let poll = self.shared.backend.read().0.direct_io_poll;
        let mut st = self.cq.state.lock();
        let wanted: Vec<ReqId> = ids
            .iter()
            .copied()
            .filter(|id| st.outstanding.contains(id))
            .collect();
        loop {
            if wanted.iter().all(|id| st.ready.contains_key(id)) {
                break;
            }
            let now = Instant::now();
            if let Some(d) = deadline {
                if now >= d {
                    break;
                }
            }
            if poll {
                drop(st);
                std::thread::yield_now();
                st = self.cq.state.lock();
            } else {
                match deadline {
                    Some(d) => {
                        self.cq.cond.wait_for(&mut st, d - now);
                    }
                    None => self.cq.cond.wait(&mut st),
                }
            }
        }
        let mut out = WaitOutcome::default();
        for id in wanted {
            match st.ready.remove(&id) {
                Some(ev) => {
                    st.outstanding.remove(&id);
                    out.events.push(ev);
                }
                None => out.incomplete.push(id),
            }
        }
        out
    }

    /// Harvests every completed request without blocking.
    pub fn poll_completions(&self) -> Vec<CompletionEvent> {
        let mut st = self.cq.state.lock();
        let ready = std::mem::take(&mut st.ready);
        for id in ready.keys() {
            st.outstanding.remove(id);
        }
        ready.into_values().collect()
    }

    /// Harvests the listed requests that have completed, without blocking.
    pub fn take_ready(&self, ids: &[ReqId]) -> Vec<CompletionEvent> {
        let mut st = self.cq.state.lock();
        let mut out = Vec::new();
        for id in ids {
            if let Some(ev) = st.ready.remove(id) {
                st.outstanding.remove(id);
                out.push(ev);
            }
        }
        out
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Requests submitted on this queue that have not completed yet.
    pub fn pending(&self) -> usize {
        self.cq.state.lock().pending
    }

    pub fn vfs(&self) -> &Arc<Vfs> {
        &self.shared.vfs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn setup(params: BackendParams) -> (tempfile::TempDir, IoEngine) {
        let dir = tempfile::tempdir().unwrap();
        let vfs = Vfs::new(dir.path()).unwrap();
        (dir, IoEngine::new(vfs, params))
    }

    #[test]
    fn sync_write_is_complete_on_return() {
        let (dir, io) = setup(BackendParams::sync());
        let q = io.queue(8);
        let f = io.vfs().create("f").unwrap();
        let buf = vec![7u8; MIB as usize];
        let id = q
            .submit(IoOp::Write {
                file: f.clone(),
                offset: 0,
                buf,
            })
            .unwrap();
        assert_eq!(fs::metadata(dir.path().join("f")).unwrap().len(), MIB);
        let evs = q.poll_completions();
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0].req_id, id);
        assert!(evs[0].status.is_ok());
        assert_eq!(evs[0].buffer.as_ref().unwrap().len(), MIB as usize);
    }

    #[test]
    fn simulated_fsync_batch_waits_for_latency() {
        let lat = Duration::from_millis(5);
        let (_dir, io) = setup(BackendParams::simulated(Duration::ZERO, lat));
        let q = io.queue(8);
        let files: Vec<_> = (0..3)
            .map(|i| {
                let f = io.vfs().create(&format!("f{i}")).unwrap();
                io.vfs().append(&f, b"data").unwrap();
                f
            })
            .collect();
        let start = Instant::now();
        let id = q.submit(IoOp::FsyncBatch { files }).unwrap();
        assert!(q.poll_completions().is_empty());
        let out = q.wait_all(&[id], None);
        assert!(out.is_complete());
        assert!(start.elapsed() >= lat);
        assert!(out.events[0].complete_time - out.events[0].submit_time >= lat);
    }

    #[test]
    fn write_to_closed_file_fails_at_completion() {
        let (_dir, io) = setup(BackendParams::host_async(2));
        let q = io.queue(8);
        let f = io.vfs().create("f").unwrap();
        f.close();
        let id = q
            .submit(IoOp::Write {
                file: f,
                offset: 0,
                buf: vec![1; 16],
            })
            .unwrap();
        let out = q.wait_all(&[id], None);
        assert!(matches!(out.events[0].status, IoStatus::IoError { .. }));
    }

    #[test]
    fn poll_on_idle_queue_is_empty() {
        let (_dir, io) = setup(BackendParams::host_async(1));
        assert!(io.queue(4).poll_completions().is_empty());
    }

    #[test]
    fn waited_events_are_not_delivered_again() {
        let (_dir, io) = setup(BackendParams::host_async(2));
        let q = io.queue(64);
        let f = io.vfs().create("f").unwrap();
        let ids: Vec<_> = (0..10)
            .map(|i| {
                q.submit(IoOp::Write {
                    file: f.clone(),
                    offset: i * 4,
                    buf: vec![i as u8; 4],
                })
                .unwrap()
            })
            .collect();
        let out = q.wait_all(&ids, None);
        assert_eq!(out.events.len(), 10);
        assert!(q.poll_completions().is_empty());
        // Re-waiting on harvested ids returns immediately with nothing.
        let again = q.wait_all(&ids, Some(Duration::from_millis(1)));
        assert!(again.events.is_empty() && again.incomplete.is_empty());
    }

    #[test]
    fn timeout_reports_incomplete_requests() {
        let (_dir, io) = setup(BackendParams::simulated(
            Duration::ZERO,
            Duration::from_millis(200),
        ));
        let q = io.queue(4);
        let f = io.vfs().create("f").unwrap();
        let id = q.submit(IoOp::Fsync { file: f }).unwrap();
        let out = q.wait_all(&[id], Some(Duration::from_millis(5)));
        assert_eq!(out.incomplete, vec![id]);
        // The event stays harvestable.
        let out = q.wait_all(&[id], None);
        assert_eq!(out.events.len(), 1);
    }

    #[test]
    fn queue_full_signals_backpressure() {
        let (_dir, io) = setup(BackendParams::simulated(
            Duration::ZERO,
            Duration::from_millis(50),
        ));
        let q = io.queue(2);
        let f = io.vfs().create("f").unwrap();
        q.submit(IoOp::Fsync { file: f.clone() }).unwrap();
        q.submit(IoOp::Fsync { file: f.clone() }).unwrap();
        assert!(matches!(
            q.submit(IoOp::Fsync { file: f }),
            Err(Error::QueueFull { depth: 2 })
        ));
    }

    #[test]
    fn backend_switch_requires_idle_engine() {
        let (_dir, io) = setup(BackendParams::simulated(
            Duration::ZERO,
            Duration::from_millis(100),
        ));
        let q = io.queue(4);
        let f = io.vfs().create("f").unwrap();
        let id = q.submit(IoOp::Fsync { file: f }).unwrap();
        assert!(matches!(
            io.set_backend(BackendParams::sync()),
            Err(Error::InFlight(1))
        ));
        q.wait_all(&[id], None);
        io.set_backend(BackendParams::simulated(
            Duration::ZERO,
            Duration::from_millis(10),
        ))
        .unwrap();
        assert_eq!(io.params().sim_fsync_latency, Duration::from_millis(10));
    }

    #[test]
    fn direct_poll_keeps_completion_semantics() {
        let mut params = BackendParams::host_async(2);
        params.direct_io_poll = true;
        let (dir, io) = setup(params);
        let q = io.queue(8);
        let f = io.vfs().create("f").unwrap();
        let a = q
            .submit(IoOp::Write {
                file: f.clone(),
                offset: 0,
                buf: b"abc".to_vec(),
            })
            .unwrap();
        let b = q.submit(IoOp::Fsync { file: f }).unwrap();
        let out = q.wait_all(&[a, b], None);
        assert!(out.is_complete() && out.first_error().is_none());
        assert_eq!(fs::read(dir.path().join("f")).unwrap(), b"abc");
    }

    #[test]
    fn injected_fsync_fault_fails_batch_and_keeps_file_volatile() {
        let (dir, io) = setup(BackendParams::host_async(2));
        let q = io.queue(8);
        let a = io.vfs().create("sst-1.sst").unwrap();
        let b = io.vfs().create("sst-2.sst").unwrap();
        io.vfs().append(&a, b"a").unwrap();
        io.vfs().append(&b, b"b").unwrap();
        io.inject_fault(FaultSpec {
            op: FaultOp::Fsync,
            file_pattern: Some("sst-2".into()),
            times: 1,
        });
        let id = q
            .submit(IoOp::FsyncBatch {
                files: vec![a, b],
            })
            .unwrap();
        let out = q.wait_all(&[id], None);
        assert!(out.first_error().is_some());
        io.vfs().power_loss();
        assert!(dir.path().join("sst-1.sst").exists());
        assert!(!dir.path().join("sst-2.sst").exists());
    }
}
