//! Generation-dependency ledger.
//!
//! Each asynchronous compaction opens an epoch recording its parents (the
//! inputs, still on disk) and its offspring (the outputs, written but not
//! yet known to be durable). An epoch is retired once its fsync batch has
//! completed and every ancestor epoch is retired:
//!
//! 1. `mark_durable` for the offspring,
//! 2. delete the parents,
//! 3. `ledger_close`.
//!
//! The ledger itself does no I/O; everything goes through [`LedgerHost`].

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{IoStatus, ReqId};
use crate::types::{EpochId, FileId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EntryState {
    /// Fsync batch submitted, completion not yet observed.
    Pending,
    /// Batch completed; waiting for ancestors or for the retire steps.
    Durable,
    Retired,
}

#[derive(Debug, Clone)]
pub struct LedgerEntry {
    pub epoch: EpochId,
    pub parents: Vec<FileId>,
    pub offspring: Vec<FileId>,
    pub batch: Option<ReqId>,
    pub state: EntryState,
    pub opened_at: Instant,
    /// Failed fsync attempts since the last success or regeneration.
    pub failures: u32,
    pub regenerated: bool,
}

/// Side effects the ledger needs from the engine.
pub trait LedgerHost {
    /// Non-blocking completion check of a batch.
    fn poll_batch(&mut self, batch: ReqId) -> Option<IoStatus>;
    /// Blocks until the batch completes.
    fn wait_batch(&mut self, batch: ReqId) -> IoStatus;
    fn resubmit_fsync(&mut self, epoch: EpochId, files: &[FileId]) -> Result<ReqId>;
    /// Rewrites the offspring of `epoch` from its parents.
    fn regenerate(&mut self, epoch: EpochId) -> Result<()>;
    fn mark_durable(&mut self, epoch: EpochId, files: &[FileId]) -> Result<()>;
    fn delete_parents(&mut self, epoch: EpochId, files: &[FileId]) -> Result<()>;
    fn close(&mut self, epoch: EpochId) -> Result<()>;
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LedgerStats {
    pub opened: u64,
    pub retired: u64,
    pub checkups: u64,
    /// Check-ups that had to block on a pending batch.
    pub fallbacks: u64,
    pub fsync_retries: u64,
    pub regenerations: u64,
    pub sweep_retired: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EntrySummary {
    pub epoch: EpochId,
    pub state: EntryState,
    pub parents: Vec<FileId>,
    pub offspring: Vec<FileId>,
    pub age_ms: u128,
}

pub struct Ledger {
    entries: BTreeMap<EpochId, LedgerEntry>,
    /// Open epoch that produced each offspring file.
    producer: HashMap<FileId, EpochId>,
    max_retries: u32,
    stats: LedgerStats,
}

impl Default for Ledger {
    fn default() -> Self {
        Ledger::new(2)
    }
}

impl Ledger {
    pub fn new(max_retries: u32) -> Self {
        Ledger {
            entries: BTreeMap::new(),
            producer: HashMap::new(),
            max_retries,
            stats: LedgerStats::default(),
        }
    }

    pub fn open(
        &mut self,
        epoch: EpochId,
        parents: Vec<FileId>,
        offspring: Vec<FileId>,
        batch: Option<ReqId>,
        now: Instant,
    ) {
        for f in &offspring {
            self.producer.insert(*f, epoch);
        }
        let state = if batch.is_some() {
            EntryState::Pending
        } else {
            EntryState::Durable
        };
        self.entries.insert(
            epoch,
            LedgerEntry {
                epoch,
                parents,
                offspring,
                batch,
                state,
                opened_at: now,
                failures: 0,
                regenerated: false,
            },
        );
        self.stats.opened += 1;
    }

    pub fn stats(&self) -> &LedgerStats {
        &self.stats
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn pending(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.state == EntryState::Pending)
            .count()
    }

    pub fn entry(&self, epoch: EpochId) -> Option<&LedgerEntry> {
        self.entries.get(&epoch)
    }

    pub fn entries(&self) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.values()
    }

    /// Epoch that produced `file`, if it is still open.
    pub fn producer_of(&self, file: FileId) -> Option<EpochId> {
        self.producer.get(&file).copied()
    }

    pub fn summary(&self, now: Instant) -> Vec<EntrySummary> {
        self.entries
            .values()
            .map(|e| EntrySummary {
                epoch: e.epoch,
                state: e.state,
                parents: e.parents.clone(),
                offspring: e.offspring.clone(),
                age_ms: now.saturating_duration_since(e.opened_at).as_millis(),
            })
            .collect()
    }

    fn on_completion(&mut self, host: &mut dyn LedgerHost, epoch: EpochId, status: IoStatus) -> Result<()> {
        let e = self.entries.get_mut(&epoch).expect("completion for unknown epoch");
        if status.is_ok() {
            e.state = EntryState::Durable;
            e.batch = None;
            e.failures = 0;
            return Ok(());
        }
        e.failures += 1;
        if e.failures > self.max_retries {
            if e.regenerated {
                e.batch = None;
                return Err(Error::LedgerCorruption {
                    epoch,
                    reason: format!("fsync keeps failing after regeneration: {status:?}"),
                });
            }
            host.regenerate(epoch)?;
            e.regenerated = true;
            e.failures = 0;
            self.stats.regenerations += 1;
        } else {
            self.stats.fsync_retries += 1;
        }
        e.batch = Some(host.resubmit_fsync(epoch, &e.offspring)?);
        Ok(())
    }

    /// Polls every pending batch without blocking.
    pub fn harvest(&mut self, host: &mut dyn LedgerHost) -> Result<()> {
        let pending: Vec<(EpochId, ReqId)> = self
            .entries
            .values()
            .filter(|e| e.state == EntryState::Pending)
            .filter_map(|e| e.batch.map(|b| (e.epoch, b)))
            .collect();
        for (epoch, batch) in pending {
            if let Some(status) = host.poll_batch(batch) {
                self.on_completion(host, epoch, status)?;
            }
        }
        Ok(())
    }

    /// Blocks until `epoch` leaves the Pending state.
    fn settle(&mut self, host: &mut dyn LedgerHost, epoch: EpochId) -> Result<()> {
        while let Some(batch) = self
            .entries
            .get(&epoch)
            .filter(|e| e.state == EntryState::Pending)
            .and_then(|e| e.batch)
        {
            let status = host.wait_batch(batch);
            self.on_completion(host, epoch, status)?;
        }
        Ok(())
    }

    fn ancestors_open(&self, e: &LedgerEntry) -> bool {
        e.parents.iter().any(|p| {
            self.producer
                .get(p)
                .is_some_and(|anc| *anc != e.epoch && self.entries.contains_key(anc))
        })
    }

    /// Retires every Durable epoch whose ancestors are retired, oldest
    /// first so chains retire transitively.
    pub fn retire_ready(&mut self, host: &mut dyn LedgerHost) -> Result<Vec<EpochId>> {
        let mut retired = Vec::new();
        let epochs: Vec<EpochId> = self.entries.keys().copied().collect();
        for epoch in epochs {
            let e = &self.entries[&epoch];
            if e.state != EntryState::Durable || self.ancestors_open(e) {
                continue;
            }
            let (parents, offspring) = (e.parents.clone(), e.offspring.clone());
            host.mark_durable(epoch, &offspring)?;
            host.delete_parents(epoch, &parents)?;
            host.close(epoch)?;
            self.entries.remove(&epoch);
            for f in &offspring {
                if self.producer.get(f) == Some(&epoch) {
                    self.producer.remove(f);
                }
            }
            self.stats.retired += 1;
            retired.push(epoch);
        }
        Ok(retired)
    }

    /// Check-up at the start of a compaction: never blocks.
    pub fn checkup_begin(&mut self, host: &mut dyn LedgerHost) -> Result<Vec<EpochId>> {
        self.harvest(host)?;
        self.retire_ready(host)
    }

    /// Check-up before a compaction reads `inputs`. Retires whatever is
    /// ready; if an input was produced by an epoch whose batch is still
    /// pending, blocks on that batch (and on pending ancestors of that
    /// epoch) and reports that it had to.
    pub fn checkup(&mut self, host: &mut dyn LedgerHost, inputs: &[FileId]) -> Result<bool> {
        self.stats.checkups += 1;
        self.harvest(host)?;
        self.retire_ready(host)?;
        let mut chain: Vec<EpochId> = Vec::new();
        let mut stack: Vec<EpochId> = inputs.iter().filter_map(|f| self.producer_of(*f)).collect();
        while let Some(epoch) = stack.pop() {
            if chain.contains(&epoch) {
                continue;
            }
            let Some(e) = self.entries.get(&epoch) else {
                continue;
            };
            chain.push(epoch);
            stack.extend(e.parents.iter().filter_map(|p| self.producer_of(*p)));
        }
        chain.sort_unstable();
        let pending: Vec<EpochId> = chain
            .into_iter()
            .filter(|e| self.entries[e].state == EntryState::Pending)
            .collect();
        if pending.is_empty() {
            return Ok(false);
        }
        self.stats.fallbacks += 1;
        for epoch in pending {
            self.settle(host, epoch)?;
        }
        self.retire_ready(host)?;
        Ok(true)
    }

    /// Resolves entries older than `max_age`, blocking on their batches if
    /// needed, and retires whatever is ready.
    pub fn sweep(&mut self, host: &mut dyn LedgerHost, now: Instant, max_age: Duration) -> Result<Vec<EpochId>> {
        self.harvest(host)?;
        let old: Vec<EpochId> = self
            .entries
            .values()
            .filter(|e| now.saturating_duration_since(e.opened_at) >= max_age)
            .map(|e| e.epoch)
            .collect();
        if old.is_empty() {
            return Ok(Vec::new());
        }
        for &epoch in &old {
            self.settle(host, epoch)?;
        }
        // Ancestors of an outlier are at least as old, so they were
        // settled above.
        let retired = self.retire_ready(host)?;
        self.stats.sweep_retired += retired.iter().filter(|e| old.contains(e)).count() as u64;
        Ok(retired)
    }

    /// Settles and retires everything (clean shutdown).
    pub fn retire_all(&mut self, host: &mut dyn LedgerHost) -> Result<()> {
        let epochs: Vec<EpochId> = self.entries.keys().copied().collect();
        for epoch in epochs {
            self.settle(host, epoch)?;
        }
        self.retire_ready(host)?;
        if let Some(e) = self.entries.values().next() {
            return Err(Error::LedgerCorruption {
                epoch: e.epoch,
                reason: "entry could not be retired".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    /// Host whose batches complete only when told to.
    #[derive(Default)]
    struct Host {
        done: HashMap<ReqId, IoStatus>,
        next: u64,
        log: Vec<String>,
        durable: HashSet<FileId>,
        deleted: HashSet<FileId>,
        fail_next_waits: u32,
    }

    impl Host {
        fn batch(&mut self) -> ReqId {
            self.next += 1;
            ReqId(self.next)
        }
    }

    impl LedgerHost for Host {
        fn poll_batch(&mut self, b: ReqId) -> Option<IoStatus> {
            self.done.remove(&b)
        }
        fn wait_batch(&mut self, b: ReqId) -> IoStatus {
            self.log.push(format!("wait {}", b.0));
            if self.fail_next_waits > 0 {
                self.fail_next_waits -= 1;
                return IoStatus::IoError { code: 5, message: "eio".into() };
            }
            self.done.remove(&b).unwrap_or(IoStatus::Ok)
        }
        fn resubmit_fsync(&mut self, e: EpochId, _: &[FileId]) -> Result<ReqId> {
            self.log.push(format!("resubmit {e}"));
            Ok(self.batch())
        }
        fn regenerate(&mut self, e: EpochId) -> Result<()> {
            self.log.push(format!("regen {e}"));
            Ok(())
        }
        fn mark_durable(&mut self, e: EpochId, files: &[FileId]) -> Result<()> {
            self.durable.extend(files);
            self.log.push(format!("durable {e}"));
            Ok(())
        }
        fn delete_parents(&mut self, e: EpochId, files: &[FileId]) -> Result<()> {
            self.deleted.extend(files);
            self.log.push(format!("delete {e}"));
            Ok(())
        }
        fn close(&mut self, e: EpochId) -> Result<()> {
            self.log.push(format!("close {e}"));
            Ok(())
        }
    }

    #[test]
    fn retirement_steps_run_in_order() {
        let mut h = Host::default();
        let mut l = Ledger::default();
        let b = h.batch();
        l.open(1, vec![10, 11], vec![20], Some(b), Instant::now());
        l.checkup_begin(&mut h).unwrap();
        assert_eq!(l.len(), 1);
        h.done.insert(b, IoStatus::Ok);
        assert_eq!(l.checkup_begin(&mut h).unwrap(), vec![1]);
        assert_eq!(h.log, vec!["durable 1", "delete 1", "close 1"]);
        assert!(l.is_empty());
    }

    #[test]
    fn descendant_waits_for_its_ancestor() {
        let mut h = Host::default();
        let mut l = Ledger::default();
        let (b1, b2) = (h.batch(), h.batch());
        l.open(1, vec![1], vec![2, 3], Some(b1), Instant::now());
        l.open(2, vec![2, 9], vec![4], Some(b2), Instant::now());
        h.done.insert(b2, IoStatus::Ok);
        assert!(l.checkup_begin(&mut h).unwrap().is_empty());
        assert!(!h.deleted.contains(&2));
        h.done.insert(b1, IoStatus::Ok);
        assert_eq!(l.checkup_begin(&mut h).unwrap(), vec![1, 2]);
        assert_eq!(h.deleted, [1, 2, 9].into());
    }

    #[test]
    fn checkup_blocks_only_for_pending_producers_of_inputs() {
        let mut h = Host::default();
        let mut l = Ledger::default();
        let (b1, b2) = (h.batch(), h.batch());
        l.open(1, vec![1], vec![2], Some(b1), Instant::now());
        l.open(2, vec![5], vec![6], Some(b2), Instant::now());
        // Inputs produced by nobody pending: no wait.
        assert!(!l.checkup(&mut h, &[9]).unwrap());
        assert!(h.log.iter().all(|s| !s.starts_with("wait")));
        // Input 2 comes from pending epoch 1: wait on exactly that batch.
        assert!(l.checkup(&mut h, &[2, 9]).unwrap());
        assert_eq!(h.log, vec![format!("wait {}", b1.0), "durable 1".into(), "delete 1".into(), "close 1".into()]);
        assert_eq!(l.stats().fallbacks, 1);
        assert_eq!(l.stats().checkups, 2);
        assert_eq!(l.len(), 1);
    }

    #[test]
    fn checkup_settles_pending_ancestors_too() {
        let mut h = Host::default();
        let mut l = Ledger::default();
        let (b1, b2) = (h.batch(), h.batch());
        l.open(1, vec![1], vec![2], Some(b1), Instant::now());
        l.open(2, vec![2], vec![3], Some(b2), Instant::now());
        assert!(l.checkup(&mut h, &[3]).unwrap());
        assert!(l.is_empty());
        assert_eq!(h.deleted, [1, 2].into());
    }

    #[test]
    fn failed_fsync_is_retried_then_regenerated() {
        let mut h = Host::default();
        let mut l = Ledger::new(2);
        let b = h.batch();
        l.open(1, vec![1], vec![2], Some(b), Instant::now());
        h.fail_next_waits = 3;
        l.retire_all(&mut h).unwrap();
        let resubmits = h.log.iter().filter(|s| s.starts_with("resubmit")).count();
        assert_eq!(resubmits, 3);
        assert!(h.log.contains(&"regen 1".to_string()));
        assert_eq!(l.stats().regenerations, 1);
        assert!(h.deleted.contains(&1));

        // Failing again after regeneration is reported, not hidden.
        let mut l = Ledger::new(0);
        let b = h.batch();
        l.open(5, vec![7], vec![8], Some(b), Instant::now());
        h.fail_next_waits = 2;
        assert!(matches!(l.retire_all(&mut h), Err(Error::LedgerCorruption { .. })));
    }

    #[test]
    fn sweep_only_touches_outliers() {
        let mut h = Host::default();
        let mut l = Ledger::default();
        let t0 = Instant::now();
        let (b1, b2) = (h.batch(), h.batch());
        l.open(1, vec![1], vec![2], Some(b1), t0);
        l.open(2, vec![5], vec![6], Some(b2), t0 + Duration::from_secs(20));
        let now = t0 + Duration::from_secs(31);
        let retired = l.sweep(&mut h, now, Duration::from_secs(30)).unwrap();
        assert_eq!(retired, vec![1]);
        assert_eq!(l.stats().sweep_retired, 1);
        assert_eq!(l.len(), 1);
    }
}
