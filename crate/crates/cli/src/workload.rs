//! Seeded request generators and the multi-threaded driver.

use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use deferlsm::Db;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::Serialize;

use crate::report::{LatencyRecorder, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    FillRandom,
    Overwrite,
    ReadSeq,
    ReadRandom,
    YcsbA,
    YcsbB,
    YcsbC,
    YcsbD,
    YcsbE,
    YcsbF,
    /// Sequential insertion of the whole key space.
    Load,
}

impl FromStr for WorkloadKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fillrandom" => WorkloadKind::FillRandom,
            "overwrite" => WorkloadKind::Overwrite,
            "readseq" => WorkloadKind::ReadSeq,
            "readrandom" => WorkloadKind::ReadRandom,
            "ycsb_a" | "ycsba" => WorkloadKind::YcsbA,
            "ycsb_b" | "ycsbb" => WorkloadKind::YcsbB,
            "ycsb_c" | "ycsbc" => WorkloadKind::YcsbC,
            "ycsb_d" | "ycsbd" => WorkloadKind::YcsbD,
            "ycsb_e" | "ycsbe" => WorkloadKind::YcsbE,
            "ycsb_f" | "ycsbf" => WorkloadKind::YcsbF,
            "load" | "ycsb_load" => WorkloadKind::Load,
            other => bail!("unknown workload '{other}'"),
        })
    }
}

impl WorkloadKind {
    /// Whether the workload only inserts or updates.
    pub fn is_write_only(self) -> bool {
        matches!(
            self,
            WorkloadKind::FillRandom | WorkloadKind::Overwrite | WorkloadKind::Load
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyDistribution {
    Uniform,
    Zipfian,
    /// Skewed toward the most recently inserted keys.
    Latest,
}

impl FromStr for KeyDistribution {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform" => KeyDistribution::Uniform,
            "zipfian" | "zipf" => KeyDistribution::Zipfian,
            "latest" => KeyDistribution::Latest,
            other => bail!("unknown key distribution '{other}'"),
        })
    }
}

/// YCSB default skew.
pub const ZIPF_CONSTANT: f64 = 0.99;
const SCAN_MAX_LEN: usize = 100;

#[derive(Debug, Clone, Serialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub num_ops: u64,
    pub threads: usize,
    pub key_size: usize,
    pub value_size: usize,
    pub key_distribution: KeyDistribution,
    pub seed: u64,
    /// Number of distinct keys; defaults to `num_ops`.
    pub key_space: Option<u64>,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, num_ops: u64) -> Self {
        WorkloadSpec {
            kind,
            num_ops,
            threads: 1,
            key_size: 16,
            value_size: 1024,
            key_distribution: default_distribution(kind),
            seed: 42,
            key_space: None,
        }
    }

    pub fn key_space(&self) -> u64 {
        self.key_space.unwrap_or(self.num_ops).max(1)
    }

    /// Operations issued by thread `t`.
    pub fn ops_for_thread(&self, t: usize) -> u64 {
        let n = self.threads.max(1) as u64;
        self.num_ops / n + u64::from((t as u64) < self.num_ops % n)
    }

    /// First key index inserted by thread `t` in sequential workloads.
    fn first_op_of_thread(&self, t: usize) -> u64 {
        (0..t).map(|i| self.ops_for_thread(i)).sum()
    }
}

fn default_distribution(kind: WorkloadKind) -> KeyDistribution {
    match kind {
        WorkloadKind::YcsbA
        | WorkloadKind::YcsbB
        | WorkloadKind::YcsbC
        | WorkloadKind::YcsbE
        | WorkloadKind::YcsbF => KeyDistribution::Zipfian,
        WorkloadKind::YcsbD => KeyDistribution::Latest,
        _ => KeyDistribution::Uniform,
    }
}

/// Fixed-width decimal key; wider indices simply produce longer keys.
pub fn make_key(index: u64, key_size: usize) -> Vec<u8> {
    format!("{index:0key_size$}").into_bytes()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Put { key: u64, value: Vec<u8> },
    Get { key: u64 },
    Scan { start: u64, len: usize },
    /// Read then write back a new value.
    ReadModifyWrite { key: u64, value: Vec<u8> },
}

/// Deterministic request stream of one driver thread.
pub struct RequestStream {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    zipf: Option<Zipf<f64>>,
    remaining: u64,
    /// Next key index for sequential inserts.
    insert_cursor: u64,
    /// Keys known to exist when sampling "latest".
    inserted: u64,
}

impl RequestStream {
    pub fn new(spec: &WorkloadSpec, thread: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(thread as u64);
        let space = spec.key_space();
        let zipf = match spec.key_distribution {
            KeyDistribution::Uniform => None,
            _ => Some(Zipf::new(space, ZIPF_CONSTANT).expect("valid zipf parameters")),
        };
        let insert_cursor = match spec.kind {
            WorkloadKind::Load => spec.first_op_of_thread(thread),
            // Inserts of D and E extend the loaded key space; threads use
            // disjoint strides.
            _ => space + thread as u64,
        };
        RequestStream {
            spec: spec.clone(),
            rng,
            zipf,
            remaining: spec.ops_for_thread(thread),
            insert_cursor,
            inserted: space,
        }
    }

    fn value(&mut self) -> Vec<u8> {
        let mut v = vec![0u8; self.spec.value_size];
        self.rng.fill_bytes(&mut v);
        v
    }

    fn pick_key(&mut self) -> u64 {
        let space = self.spec.key_space();
        match (self.spec.key_distribution, &self.zipf) {
            (KeyDistribution::Uniform, _) | (_, None) => self.rng.gen_range(0..space),
            (KeyDistribution::Zipfian, Some(z)) => {
                let rank = z.sample(&mut self.rng) as u64 - 1;
                scatter(rank) % space
            }
            (KeyDistribution::Latest, Some(z)) => {
                let rank = (z.sample(&mut self.rng) as u64 - 1).min(self.inserted - 1);
                self.inserted - 1 - rank
            }
        }
    }

    fn next_insert(&mut self) -> u64 {
        let k = self.insert_cursor;
        self.insert_cursor += self.spec.threads.max(1) as u64;
        self.inserted = self.inserted.max(k + 1);
        k
    }
}

/// Spreads popular ranks over the key space (FNV-1a of the rank).
fn scatter(rank: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in rank.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Iterator for RequestStream {
    type Item = Request;

    fn next(&mut self) -> Option<Request> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let p: f64 = self.rng.gen();
        let req = match self.spec.kind {
            WorkloadKind::FillRandom | WorkloadKind::Overwrite => {
                let key = self.pick_key();
                Request::Put { key, value: self.value() }
            }
            WorkloadKind::Load => {
                let key = self.insert_cursor;
                self.insert_cursor += 1;
                Request::Put { key, value: self.value() }
            }
            WorkloadKind::ReadRandom | WorkloadKind::YcsbC => Request::Get { key: self.pick_key() },
            // Handled by the driver as one full scan.
            WorkloadKind::ReadSeq => Request::Scan { start: 0, len: usize::MAX },
            WorkloadKind::YcsbA | WorkloadKind::YcsbB => {
                let read_share = if self.spec.kind == WorkloadKind::YcsbA { 0.5 } else { 0.95 };
                let key = self.pick_key();
                if p < read_share {
                    Request::Get { key }
                } else {
                    Request::Put { key, value: self.value() }
                }
            }
            WorkloadKind::YcsbD => {
                if p < 0.95 {
                    Request::Get { key: self.pick_key() }
                } else {
                    let key = self.next_insert();
                    Request::Put { key, value: self.value() }
                }
            }
            WorkloadKind::YcsbE => {
                if p < 0.95 {
                    let start = self.pick_key();
                    let len = self.rng.gen_range(1..=SCAN_MAX_LEN);
                    Request::Scan { start, len }
                } else {
                    let key = self.next_insert();
                    Request::Put { key, value: self.value() }
                }
            }
            WorkloadKind::YcsbF => {
                let key = self.pick_key();
                if p < 0.5 {
                    Request::Get { key }
                } else {
                    Request::ReadModifyWrite { key, value: self.value() }
                }
            }
        };
        Some(req)
    }
}

/// Per-thread tallies merged into the report.
#[derive(Default)]
struct ThreadResult {
    latencies: LatencyRecorder,
    found: u64,
    not_found: u64,
    found_digest: u64,
    bytes: u64,
}

/// Order-independent digest of a set of key indices.
pub fn key_digest(keys: impl IntoIterator<Item = u64>) -> u64 {
    keys.into_iter()
        .map(|k| scatter(k ^ 0x5bd1_e995))
        .fold(0u64, u64::wrapping_add)
}

fn run_thread(db: &Db, spec: &WorkloadSpec, t: usize, progress: &AtomicU64) -> Result<ThreadResult> {
    let mut out = ThreadResult::default();
    if spec.kind == WorkloadKind::ReadSeq {
        if t == 0 {
            let start = Instant::now();
            let mut n = 0u64;
            for r in db.iter(None, None)? {
                let (k, v) = r?;
                out.bytes += (k.len() + v.len()) as u64;
                n += 1;
                if n >= spec.num_ops {
                    break;
                }
            }
            out.found = n;
            out.latencies.record(start.elapsed());
            progress.fetch_add(n, Ordering::Relaxed);
        }
        return Ok(out);
    }
    for req in RequestStream::new(spec, t) {
        let start = Instant::now();
        match req {
            Request::Put { key, value } => {
                out.bytes += (spec.key_size + value.len()) as u64;
                db.put(&make_key(key, spec.key_size), &value)
                    .with_context(|| format!("put key {key}"))?;
            }
            Request::Get { key } => match db.get(&make_key(key, spec.key_size))? {
                Some(v) => {
                    out.bytes += v.len() as u64;
                    out.found += 1;
                    out.found_digest = out.found_digest.wrapping_add(key_digest([key]));
                }
                None => out.not_found += 1,
            },
            Request::Scan { start: s, len } => {
                let from = make_key(s, spec.key_size);
                for r in db.iter(Some(&from), None)?.take(len) {
                    let (k, v) = r?;
                    out.bytes += (k.len() + v.len()) as u64;
                }
            }
            Request::ReadModifyWrite { key, value } => {
                let k = make_key(key, spec.key_size);
                if db.get(&k)?.is_some() {
                    out.found += 1;
                } else {
                    out.not_found += 1;
                }
                out.bytes += (spec.key_size + value.len()) as u64;
                db.put(&k, &value)?;
            }
        }
        out.latencies.record(start.elapsed());
        progress.fetch_add(1, Ordering::Relaxed);
    }
    Ok(out)
}

/// Drives `db` with `spec` from `spec.threads` threads.
pub fn run_workload(db: &Db, spec: &WorkloadSpec) -> Result<RunReport> {
    run_workload_with_progress(db, spec, None)
}

/// Like [`run_workload`], printing progress to stderr every `every`.
pub fn run_workload_with_progress(
    db: &Db,
    spec: &WorkloadSpec,
    every: Option<Duration>,
) -> Result<RunReport> {
    if spec.threads == 0 {
        bail!("threads must be >= 1");
    }
    let before = db.metrics();
    let progress = AtomicU64::new(0);
    let done = std::sync::atomic::AtomicBool::new(false);
    let start = Instant::now();
    let results: Vec<Result<ThreadResult>> = std::thread::scope(|s| {
        if let Some(every) = every {
            let (progress, done) = (&progress, &done);
            s.spawn(move || {
                let mut last = Instant::now();
                while !done.load(Ordering::Relaxed) {
                    std::thread::sleep(Duration::from_millis(50));
                    if last.elapsed() >= every {
                        last = Instant::now();
                        let n = progress.load(Ordering::Relaxed);
                        eprintln!(
                            "  {n}/{} ops ({:.0}%) after {:.1}s",
                            spec.num_ops,
                            100.0 * n as f64 / spec.num_ops.max(1) as f64,
                            start.elapsed().as_secs_f64()
                        );
                    }
                }
            });
        }
        let handles: Vec<_> = (0..spec.threads)
            .map(|t| {
                let progress = &progress;
                s.spawn(move || run_thread(db, spec, t, progress))
            })
            .collect();
        let out = handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("driver thread panicked"))))
            .collect();
        done.store(true, Ordering::Relaxed);
        out
    });
    let elapsed = start.elapsed();
    let mut merged = ThreadResult::default();
    for r in results {
        let r = r?;
        merged.latencies.merge(r.latencies);
        merged.found += r.found;
        merged.not_found += r.not_found;
        merged.found_digest = merged.found_digest.wrapping_add(r.found_digest);
        merged.bytes += r.bytes;
    }
    let after = db.metrics();
    Ok(RunReport::build(
        spec,
        db.config(),
        elapsed,
        &merged.latencies,
        merged.found,
        merged.not_found,
        merged.found_digest,
        merged.bytes,
        &before,
        after,
    ))
}
