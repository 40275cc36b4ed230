//! Counters, stall accounting and the compaction schedule log.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::Serialize;

use crate::ledger::LedgerStats;
use crate::types::EpochId;

/// Wall time during which at least one writer was stalled.
#[derive(Default)]
pub struct StallTracker {
    inner: Mutex<StallInner>,
}

#[derive(Default)]
struct StallInner {
    stalled: usize,
    since: Option<Instant>,
    total: Duration,
    episodes: u64,
}

impl StallTracker {
    pub fn begin(&self) {
        let mut s = self.inner.lock();
        if s.stalled == 0 {
            s.since = Some(Instant::now());
            s.episodes += 1;
        }
        s.stalled += 1;
    }

    pub fn end(&self) {
        let mut s = self.inner.lock();
        s.stalled -= 1;
        if s.stalled == 0 {
            if let Some(t) = s.since.take() {
                s.total += t.elapsed();
            }
        }
    }

    pub fn total(&self) -> Duration {
        let s = self.inner.lock();
        s.total + s.since.map_or(Duration::ZERO, |t| t.elapsed())
    }

    pub fn episodes(&self) -> u64 {
        self.inner.lock().episodes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EventKind {
    Picked,
    MergeStarted,
    WritesDone,
    FsyncSubmitted,
    /// A check-up had to block on an earlier batch.
    Fallback,
    Committed,
    /// Device-side completion time of an epoch's fsync batch.
    BatchCompleted,
    Retired,
    FlushCommitted,
    TrivialMove,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleEvent {
    pub t_us: u64,
    pub kind: EventKind,
    pub epoch: EpochId,
}

pub struct ScheduleLog {
    start: Instant,
    events: Mutex<Vec<ScheduleEvent>>,
}

impl ScheduleLog {
    pub fn new(start: Instant) -> Self {
        ScheduleLog {
            start,
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn record(&self, kind: EventKind, epoch: EpochId) {
        self.record_at(kind, epoch, Instant::now());
    }

    pub fn record_at(&self, kind: EventKind, epoch: EpochId, at: Instant) {
        let t_us = at.saturating_duration_since(self.start).as_micros() as u64;
        self.events.lock().push(ScheduleEvent { t_us, kind, epoch });
    }

    pub fn snapshot(&self) -> Vec<ScheduleEvent> {
        let mut v = self.events.lock().clone();
        v.sort_by_key(|e| e.t_us);
        v
    }
}

/// Compactions that entered their merge phase while an earlier epoch's
/// fsync batch was submitted but not yet complete.
pub fn merges_overlapping_pending(events: &[ScheduleEvent]) -> usize {
    use std::collections::HashMap;
    let mut submitted: HashMap<EpochId, u64> = HashMap::new();
    let mut completed: HashMap<EpochId, u64> = HashMap::new();
    for e in events {
        match e.kind {
            EventKind::FsyncSubmitted => {
                submitted.insert(e.epoch, e.t_us);
            }
            EventKind::BatchCompleted => {
                completed.entry(e.epoch).or_insert(e.t_us);
            }
            _ => {}
        }
    }
    events
        .iter()
        .filter(|e| e.kind == EventKind::MergeStarted)
        .filter(|m| {
            submitted.iter().any(|(epoch, &s)| {
                *epoch < m.epoch
                    && s <= m.t_us
                    && completed.get(epoch).map_or(true, |&c| c > m.t_us)
            })
        })
        .count()
}

/// Running totals, updated lock-free.
#[derive(Default)]
pub struct Counters {
    pub user_bytes: AtomicU64,
    pub wal_bytes: AtomicU64,
    pub flush_bytes: AtomicU64,
    pub flushes: AtomicU64,
    pub compaction_read_bytes: AtomicU64,
    pub compaction_write_bytes: AtomicU64,
    pub compaction_output_files: AtomicU64,
    pub compactions: AtomicU64,
    pub trivial_moves: AtomicU64,
    pub compaction_ns: AtomicU64,
    pub write_wait_ns: AtomicU64,
    pub fsync_wait_ns: AtomicU64,
    pub commit_ns: AtomicU64,
}

pub(crate) fn add_duration(c: &AtomicU64, d: Duration) {
    c.fetch_add(d.as_nanos() as u64, Ordering::Relaxed);
}

fn secs(c: &AtomicU64) -> f64 {
    c.load(Ordering::Relaxed) as f64 / 1e9
}

fn pct(part: f64, whole: f64) -> f64 {
    if whole > 0.0 {
        100.0 * part / whole
    } else {
        0.0
    }
}

/// Where compaction wall time went.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PhaseBreakdown {
    pub total_s: f64,
    pub compute_s: f64,
    pub write_wait_s: f64,
    pub fsync_wait_s: f64,
    pub commit_s: f64,
    pub compute_pct: f64,
    pub write_pct: f64,
    pub fsync_pct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelSummary {
    pub level: usize,
    pub files: usize,
    pub bytes: u64,
    pub volatile_files: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub stall_seconds: f64,
    pub stall_episodes: u64,
    pub phases: PhaseBreakdown,
    pub compactions_count: u64,
    pub trivial_moves: u64,
    pub flushes: u64,
    pub fallback_fsync_waits: u64,
    pub checkups: u64,
    pub user_bytes: u64,
    pub wal_bytes: u64,
    /// Flush plus compaction output bytes.
    pub bytes_written: u64,
    pub flush_bytes: u64,
    pub compaction_read_bytes: u64,
    pub compaction_write_bytes: u64,
    pub compaction_output_files: u64,
    pub write_amplification: f64,
    pub ledger: LedgerStats,
    pub open_epochs: usize,
    pub levels: Vec<LevelSummary>,
}

impl Counters {
    pub fn phases(&self) -> PhaseBreakdown {
        let total = secs(&self.compaction_ns);
        let write = secs(&self.write_wait_ns);
        let fsync = secs(&self.fsync_wait_ns);
        let commit = secs(&self.commit_ns);
        let compute = (total - write - fsync - commit).max(0.0);
        PhaseBreakdown {
            total_s: total,
            compute_s: compute,
            write_wait_s: write,
            fsync_wait_s: fsync,
            commit_s: commit,
            compute_pct: pct(compute, total),
            write_pct: pct(write, total),
            fsync_pct: pct(fsync, total),
        }
    }

    pub fn report(
        &self,
        stall: &StallTracker,
        ledger: LedgerStats,
        open_epochs: usize,
        levels: Vec<LevelSummary>,
    ) -> MetricsReport {
        let get = |c: &AtomicU64| c.load(Ordering::Relaxed);
        let user = get(&self.user_bytes);
        let written = get(&self.flush_bytes) + get(&self.compaction_write_bytes);
        MetricsReport {
            stall_seconds: stall.total().as_secs_f64(),
            stall_episodes: stall.episodes(),
            phases: self.phases(),
            compactions_count: get(&self.compactions),
            trivial_moves: get(&self.trivial_moves),
            flushes: get(&self.flushes),
            fallback_fsync_waits: ledger.fallbacks,
            checkups: ledger.checkups,
            user_bytes: user,
            wal_bytes: get(&self.wal_bytes),
            bytes_written: written,
            flush_bytes: get(&self.flush_bytes),
            compaction_read_bytes: get(&self.compaction_read_bytes),
            compaction_write_bytes: get(&self.compaction_write_bytes),
            compaction_output_files: get(&self.compaction_output_files),
            write_amplification: if user > 0 { written as f64 / user as f64 } else { 0.0 },
            ledger,
            open_epochs,
            levels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stall_time_counts_overlapping_writers_once() {
        let s = StallTracker::default();
        s.begin();
        std::thread::sleep(Duration::from_millis(20));
        s.begin();
        std::thread::sleep(Duration::from_millis(20));
        s.end();
        s.end();
        let t = s.total();
        assert!(t >= Duration::from_millis(40) && t < Duration::from_millis(200), "{t:?}");
        assert_eq!(s.episodes(), 1);
    }

    #[test]
    fn overlap_detection() {
        let ev = |t_us, kind, epoch| ScheduleEvent { t_us, kind, epoch };
        let events = vec![
            ev(10, EventKind::FsyncSubmitted, 1),
            ev(15, EventKind::MergeStarted, 2),
            ev(30, EventKind::BatchCompleted, 1),
            ev(40, EventKind::MergeStarted, 3),
        ];
        assert_eq!(merges_overlapping_pending(&events), 1);
    }
}
