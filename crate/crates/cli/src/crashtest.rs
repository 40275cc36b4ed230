//! Crash matrix: run a seeded workload in a child process armed to abort
//! at one crash point, recover in the parent and compare against a model.
//!
//! The child is single-threaded, so operation `i` (zero based) carries
//! sequence number `i + 1`. At the moment of the crash the child's
//! power-loss handler discards unsynced bytes and records how many
//! operations were acknowledged and the highest flushed sequence number.
//! After recovery with last sequence number `p` the parent checks
//!
//! * `p >= flushed` (nothing that reached a table is lost),
//! * `p >= acked` when every WAL append is fsynced,
//! * `p <= acked + 1` (at most the in-flight operation surfaces),
//! * the full scan equals the model after the first `p` operations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use deferlsm::crash::{self, CrashPoint, CRASH_ENV};
use deferlsm::{CompactionMode, Db, EngineConfig, IoBackendKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Parameters shared by the parent and the child.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrashCase {
    pub point: String,
    pub nth: u64,
    pub seed: u64,
    pub ops: u64,
    pub key_space: u64,
    pub asynchronous: bool,
    pub wal_fsync: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Put(Vec<u8>, Vec<u8>),
    Delete(Vec<u8>),
}

/// The deterministic operation sequence of a case.
pub fn ops(seed: u64, count: u64, key_space: u64) -> Vec<Op> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let key = format!("k{:06}", rng.gen_range(0..key_space)).into_bytes();
            if rng.gen_bool(0.1) {
                Op::Delete(key)
            } else {
                let len = rng.gen_range(16..400);
                let value = (0..len).map(|_| rng.gen::<u8>()).collect();
                Op::Put(key, value)
            }
        })
        .collect()
}

/// Engine configuration used by both sides: tiny geometry on a simulated
/// device so that flushes, compactions and retirements all happen within a
/// few thousand operations.
pub fn case_config(case: &CrashCase) -> EngineConfig {
    EngineConfig {
        io_backend: IoBackendKind::SimulatedLatency,
        sim_fsync_latency: Duration::from_micros(500),
        sim_write_latency_per_mib: Duration::from_micros(200),
        compaction_mode: if case.asynchronous {
            CompactionMode::Asynchronous
        } else {
            CompactionMode::Synchronous
        },
        wal_fsync_each_write: case.wal_fsync,
        max_value_size: 4096,
        ..EngineConfig::tiny()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Ack {
    acked: u64,
    flushed: u64,
}

fn ack_path(dir: &Path) -> PathBuf {
    dir.with_extension("ack")
}

/// Entry point of the hidden `crash-child` command.
pub fn child_main(dir: &Path, case: &CrashCase) -> Result<()> {
    let db = Db::open(dir, case_config(case))?;
    let acked = Arc::new(AtomicU64::new(0));
    let probe = db.seqno_probe();
    let vfs = db.vfs().clone();
    let ack_file = ack_path(dir);
    {
        let acked = acked.clone();
        crash::set_power_loss_handler(Some(Arc::new(move || {
            vfs.power_loss();
            let ack = Ack {
                acked: acked.load(Ordering::SeqCst),
                flushed: probe.flushed(),
            };
            let _ = std::fs::write(&ack_file, serde_json::to_vec(&ack).unwrap_or_default());
        })));
    }
    for (i, op) in ops(case.seed, case.ops, case.key_space).into_iter().enumerate() {
        match op {
            Op::Put(k, v) => db.put(&k, &v)?,
            Op::Delete(k) => db.delete(&k)?,
        }
        acked.store(i as u64 + 1, Ordering::SeqCst);
    }
    db.close()?;
    std::fs::write(
        ack_path(dir),
        serde_json::to_vec(&Ack {
            acked: case.ops,
            flushed: case.ops,
        })?,
    )?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub case: CrashCase,
    /// The child aborted at the armed point.
    pub crashed: bool,
    pub acked: u64,
    pub flushed: u64,
    pub recovered: u64,
    pub passed: bool,
    pub detail: String,
}

fn model_after(all: &[Op], n: u64) -> BTreeMap<Vec<u8>, Vec<u8>> {
    let mut m = BTreeMap::new();
    for op in &all[..n as usize] {
        match op {
            Op::Put(k, v) => {
                m.insert(k.clone(), v.clone());
            }
            Op::Delete(k) => {
                m.remove(k);
            }
        }
    }
    m
}

/// Runs one case: child with the crash point armed, then recovery and the
/// checks listed in the module docs.
pub fn run_case(exe: &Path, workdir: &Path, case: &CrashCase) -> Result<CaseResult> {
    let dir = workdir.join(format!(
        "{}-{}-{}-{}",
        case.point,
        case.seed,
        if case.asynchronous { "async" } else { "sync" },
        if case.wal_fsync { "walsync" } else { "nowalsync" }
    ));
    let _ = std::fs::remove_dir_all(&dir);
    let _ = std::fs::remove_file(ack_path(&dir));
    std::fs::create_dir_all(&dir)?;
    let status = Command::new(exe)
        .arg("crash-child")
        .arg("--dir")
        .arg(&dir)
        .arg("--case")
        .arg(serde_json::to_string(case)?)
        .env(CRASH_ENV, format!("{}:{}", case.point, case.nth))
        .env("RUST_BACKTRACE", "0")
        .stderr(std::process::Stdio::null())
        .status()
        .context("spawning crash child")?;
    let crashed = !status.success();
    let ack: Ack = serde_json::from_slice(
        &std::fs::read(ack_path(&dir)).context("child left no ack file")?,
    )?;

    // Recovery must not inherit the armed point.
    let db = Db::open(&dir, case_config(case))?;
    let p = db.last_seqno();
    let mut problems = Vec::new();
    if p < ack.flushed {
        problems.push(format!("flushed records lost: recovered {p} < flushed {}", ack.flushed));
    }
    if case.wal_fsync && p < ack.acked {
        problems.push(format!("acknowledged records lost: recovered {p} < acked {}", ack.acked));
    }
    if p > ack.acked + 1 {
        problems.push(format!("recovered {p} beyond acked {} + 1", ack.acked));
    }
    if p <= case.ops {
        let all = ops(case.seed, case.ops, case.key_space);
        let want = model_after(&all, p);
        let got = db.scan()?;
        if got.len() != want.len() || got.iter().zip(&want).any(|(a, b)| a.0 != *b.0 || a.1 != *b.1) {
            problems.push(format!(
                "scan differs from the model at seqno {p}: {} live vs {} expected",
                got.len(),
                want.len()
            ));
        }
    }
    db.close()?;
    let _ = std::fs::remove_dir_all(&dir);
    let _ = std::fs::remove_file(ack_path(&dir));
    Ok(CaseResult {
        case: case.clone(),
        crashed,
        acked: ack.acked,
        flushed: ack.flushed,
        recovered: p,
        passed: problems.is_empty(),
        detail: problems.join("; "),
    })
}

/// Crash points selected by a `--points` argument.
pub fn parse_points(arg: &str) -> Result<Vec<CrashPoint>> {
    if arg == "all" {
        return Ok(CrashPoint::ALL.to_vec());
    }
    arg.split(',')
        .map(|s| s.trim().parse::<CrashPoint>().map_err(anyhow::Error::msg))
        .collect()
}

#[derive(Debug, Clone)]
pub struct MatrixOptions {
    pub points: Vec<CrashPoint>,
    pub reps: u64,
    pub seed: u64,
    pub ops: u64,
    pub key_space: u64,
    pub wal_fsync: Vec<bool>,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        MatrixOptions {
            points: CrashPoint::ALL.to_vec(),
            reps: 5,
            seed: 42,
            ops: 12_000,
            key_space: 3_000,
            wal_fsync: vec![true, false],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixReport {
    pub cases: Vec<CaseResult>,
    pub points: usize,
    pub passed: usize,
    pub failed: usize,
    /// Cases whose child reached the armed point.
    pub crashed: usize,
    /// Points that crashed in at least one case.
    pub points_crashed: usize,
    pub elapsed_s: f64,
}

/// Upper bound for the seeded occurrence number: WAL hooks fire once per
/// write, the others a handful of times per run.
fn max_nth(point: CrashPoint, ops: u64) -> u64 {
    match point {
        CrashPoint::WalTornAppend | CrashPoint::WalAppended => (ops / 2).max(1),
        CrashPoint::FlushWritten | CrashPoint::FlushSynced | CrashPoint::FlushCommitted => 20,
        _ => 6,
    }
}

/// Every point in every applicable compaction mode, `reps` times, with
/// seeds and occurrence numbers drawn from `seed`.
pub fn run_matrix(exe: &Path, workdir: &Path, opts: &MatrixOptions, verbose: bool) -> Result<MatrixReport> {
    if opts.points.is_empty() {
        bail!("no crash points selected");
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cases = Vec::new();
    let mut crashed_points = std::collections::HashSet::new();
    for &point in &opts.points {
        for rep in 0..opts.reps {
            for asynchronous in [true, false] {
                if (asynchronous && point.sync_only()) || (!asynchronous && point.async_only()) {
                    continue;
                }
                let wal_fsync = opts.wal_fsync[(rep as usize) % opts.wal_fsync.len()];
                let case = CrashCase {
                    point: point.name().to_string(),
                    nth: rng.gen_range(1..=max_nth(point, opts.ops)),
                    seed: rng.gen(),
                    ops: opts.ops,
                    key_space: opts.key_space,
                    asynchronous,
                    wal_fsync,
                };
                let r = run_case(exe, workdir, &case)?;
                if verbose {
                    eprintln!(
                        "{:<28} #{:<2} {:<5} wal_fsync={:<5} crashed={:<5} acked={:<6} flushed={:<6} recovered={:<6} {}{}",
                        case.point,
                        case.nth,
                        if asynchronous { "async" } else { "sync" },
                        wal_fsync,
                        r.crashed,
                        r.acked,
                        r.flushed,
                        r.recovered,
                        if r.passed { "PASS" } else { "FAIL " },
                        r.detail
                    );
                }
                if r.crashed {
                    crashed_points.insert(point);
                }
                cases.push(r);
            }
        }
    }
    let passed = cases.iter().filter(|c| c.passed).count();
    Ok(MatrixReport {
        points: opts.points.len(),
        passed,
        failed: cases.len() - passed,
        crashed: cases.iter().filter(|c| c.crashed).count(),
        points_crashed: crashed_points.len(),
        cases,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}
