//! Schedule fuzzing of the ledger against a model host.
//!
//! The model keeps a set of live files (durable or volatile), the set of
//! files on disk and the fsync batches in flight. Each schedule interleaves
//! compactions, device completions (some failing), check-ups and sweeps at
//! random, checking two properties:
//!
//! - a parent is deleted only after every offspring of its epoch had its
//!   batch complete successfully and was marked durable;
//! - at every quiescent point, each volatile live file has an open
//!   producing epoch whose parents are still on disk, recursively down to
//!   durable files.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::time::{Duration, Instant};

use deferlsm::error::Result;
use deferlsm::io::{IoStatus, ReqId};
use deferlsm::ledger::{Ledger, LedgerHost};
use deferlsm::types::{EpochId, FileId};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Default, Clone)]
pub struct FuzzReport {
    pub schedules: u64,
    pub steps: u64,
    pub retired: u64,
    pub fallbacks: u64,
    pub regenerations: u64,
    pub violations: Vec<String>,
}

struct Model {
    rng: StdRng,
    fail_rate: f64,
    next_batch: u64,
    /// Batch -> (epoch, completion once the device finished it).
    batches: HashMap<ReqId, (EpochId, Option<IoStatus>)>,
    /// Epochs whose latest batch completed successfully.
    synced: HashSet<EpochId>,
    offspring: HashMap<EpochId, Vec<FileId>>,
    live: BTreeSet<FileId>,
    durable: HashSet<FileId>,
    on_disk: HashSet<FileId>,
    /// Rewritten epochs; their later batches succeed.
    regenerated: HashSet<EpochId>,
    violations: Vec<String>,
}

impl Model {
    fn status(&mut self, epoch: EpochId) -> IoStatus {
        if !self.regenerated.contains(&epoch) && self.rng.gen_bool(self.fail_rate) {
            IoStatus::IoError {
                code: 5,
                message: "injected".into(),
            }
        } else {
            IoStatus::Ok
        }
    }

    fn submit(&mut self, epoch: EpochId) -> ReqId {
        self.next_batch += 1;
        let id = ReqId(self.next_batch);
        self.batches.insert(id, (epoch, None));
        id
    }

    fn deliver(&mut self, id: ReqId, status: IoStatus) -> IoStatus {
        let (epoch, _) = self.batches.remove(&id).expect("unknown batch");
        if status.is_ok() {
            self.synced.insert(epoch);
        } else {
            self.synced.remove(&epoch);
        }
        status
    }

    /// The device finishes one in-flight batch.
    fn complete_random(&mut self) {
        let waiting: Vec<ReqId> = self
            .batches
            .iter()
            .filter(|(_, (_, s))| s.is_none())
            .map(|(id, _)| *id)
            .collect();
        if waiting.is_empty() {
            return;
        }
        let id = waiting[self.rng.gen_range(0..waiting.len())];
        let st = self.status(self.batches[&id].0);
        self.batches.get_mut(&id).unwrap().1 = Some(st);
    }
}

impl LedgerHost for Model {
    fn poll_batch(&mut self, b: ReqId) -> Option<IoStatus> {
        let st = self.batches.get(&b)?.1.clone()?;
        Some(self.deliver(b, st))
    }

    fn wait_batch(&mut self, b: ReqId) -> IoStatus {
        let st = match self.batches.get(&b).and_then(|x| x.1.clone()) {
            Some(st) => st,
            None => self.status(self.batches[&b].0),
        };
        self.deliver(b, st)
    }

    fn resubmit_fsync(&mut self, epoch: EpochId, _: &[FileId]) -> Result<ReqId> {
        Ok(self.submit(epoch))
    }

    fn regenerate(&mut self, epoch: EpochId) -> Result<()> {
        self.regenerated.insert(epoch);
        for f in &self.offspring[&epoch] {
            if !self.on_disk.contains(f) {
                self.violations
                    .push(format!("epoch {epoch}: regenerating {f} which was deleted"));
            }
        }
        Ok(())
    }

    fn mark_durable(&mut self, epoch: EpochId, files: &[FileId]) -> Result<()> {
        if !self.synced.contains(&epoch) {
            self.violations
                .push(format!("epoch {epoch}: marked durable without a successful batch"));
        }
        self.durable.extend(files);
        Ok(())
    }

    fn delete_parents(&mut self, epoch: EpochId, files: &[FileId]) -> Result<()> {
        for o in &self.offspring[&epoch] {
            if !self.durable.contains(o) {
                self.violations.push(format!(
                    "epoch {epoch}: parents deleted while offspring {o} is not durable"
                ));
            }
        }
        for f in files {
            if self.live.contains(f) {
                self.violations.push(format!("epoch {epoch}: deleted live file {f}"));
            }
            self.on_disk.remove(f);
        }
        Ok(())
    }

    fn close(&mut self, _: EpochId) -> Result<()> {
        Ok(())
    }
}

/// Volatile live files must be backed by a chain of retained ancestors.
fn check_chain(m: &Model, ledger: &Ledger, at: &str) -> Vec<String> {
    let mut out = Vec::new();
    for e in ledger.entries() {
        for p in &e.parents {
            if !m.on_disk.contains(p) {
                out.push(format!("{at}: open epoch {} lost parent {p}", e.epoch));
            }
        }
    }
    let mut stack: Vec<FileId> = m.live.iter().copied().filter(|f| !m.durable.contains(f)).collect();
    let mut seen = HashSet::new();
    while let Some(f) = stack.pop() {
        if !seen.insert(f) || m.durable.contains(&f) {
            continue;
        }
        let Some(epoch) = ledger.producer_of(f) else {
            out.push(format!("{at}: volatile file {f} has no open producer"));
            continue;
        };
        for p in &ledger.entry(epoch).unwrap().parents {
            stack.push(*p);
        }
    }
    out
}

pub fn run_schedule(seed: u64, steps: usize, report: &mut FuzzReport) {
    let mut m = Model {
        rng: StdRng::seed_from_u64(seed),
        fail_rate: 0.08,
        next_batch: 0,
        batches: HashMap::new(),
        synced: HashSet::new(),
        offspring: HashMap::new(),
        live: BTreeSet::new(),
        durable: HashSet::new(),
        on_disk: HashSet::new(),
        regenerated: HashSet::new(),
        violations: Vec::new(),
    };
    let mut ledger = Ledger::new(m.rng.gen_range(0..3));
    let t0 = Instant::now();
    let max_age = Duration::from_secs(30);
    let mut clock = Duration::ZERO;
    let mut next_file: FileId = 1;
    let mut next_epoch: EpochId = 1;
    let mut violations = Vec::new();

    for step in 0..steps {
        clock += Duration::from_secs(m.rng.gen_range(0..8));
        let now = t0 + clock;
        let res = match m.rng.gen_range(0..10) {
            // Flush: a new durable file.
            0 | 1 => {
                m.live.insert(next_file);
                m.durable.insert(next_file);
                m.on_disk.insert(next_file);
                next_file += 1;
                Ok(())
            }
            // A full compaction, with device completions in between.
            2..=4 if !m.live.is_empty() => (|| {
                let live: Vec<FileId> = m.live.iter().copied().collect();
                let k = m.rng.gen_range(1..=live.len().min(3));
                let start = m.rng.gen_range(0..=live.len() - k);
                let parents: Vec<FileId> = live[start..start + k].to_vec();
                if ledger.checkup(&mut m, &parents)? {
                    report.fallbacks += 1;
                }
                for _ in 0..m.rng.gen_range(0..3) {
                    m.complete_random();
                }
                let epoch = next_epoch;
                next_epoch += 1;
                let offspring: Vec<FileId> = (0..m.rng.gen_range(1..=3))
                    .map(|_| {
                        next_file += 1;
                        next_file - 1
                    })
                    .collect();
                for f in &offspring {
                    m.on_disk.insert(*f);
                }
                m.offspring.insert(epoch, offspring.clone());
                let batch = m.submit(epoch);
                ledger.checkup_begin(&mut m)?;
                for p in &parents {
                    m.live.remove(p);
                }
                m.live.extend(&offspring);
                ledger.open(epoch, parents, offspring, Some(batch), now);
                Ok(())
            })(),
            5..=7 => {
                m.complete_random();
                Ok(())
            }
            8 => ledger.checkup_begin(&mut m).map(|_| ()),
            _ => ledger.sweep(&mut m, now, max_age).map(|_| ()),
        };
        if let Err(e) = res {
            violations.push(format!("seed {seed} step {step}: ledger error {e}"));
            break;
        }
        violations.extend(check_chain(&m, &ledger, &format!("seed {seed} step {step}")));
    }
    if let Err(e) = ledger.retire_all(&mut m) {
        violations.push(format!("seed {seed}: retire_all failed: {e}"));
    }
    for f in &m.live {
        if !m.durable.contains(f) {
            violations.push(format!("seed {seed}: file {f} still volatile after shutdown"));
        }
    }
    violations.extend(check_chain(&m, &ledger, &format!("seed {seed} end")));
    violations.extend(m.violations.iter().map(|v| format!("seed {seed}: {v}")));
    report.schedules += 1;
    report.steps += steps as u64;
    report.retired += ledger.stats().retired;
    report.regenerations += ledger.stats().regenerations;
    report.violations.extend(violations);
}

pub fn run(schedules: u64, steps: usize, base_seed: u64) -> FuzzReport {
    let mut report = FuzzReport::default();
    for i in 0..schedules {
        run_schedule(base_seed.wrapping_add(i), steps, &mut report);
    }
    report
}
