//! Synchronous versus asynchronous compaction on a simulated device.
//!
//! The device profile is calibrated against the host: a pilot run with
//! zero device latency measures how long compactions spend computing per
//! output MiB, and the simulated write and fsync latencies are then chosen
//! so that a synchronous compaction splits its time roughly as
//! compute 47.7%, write 6.3%, fsync 46.0% (an NVMe-class device).

use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use anyhow::{bail, Result};
use deferlsm::{CompactionMode, Db, EngineConfig, IoBackendKind};
use serde::Serialize;

use crate::report::RunReport;
use crate::workload::{run_workload_with_progress, WorkloadKind, WorkloadSpec};

const MIB: f64 = 1024.0 * 1024.0;

/// Target shares of a synchronous compaction's wall time.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PhaseShares {
    pub compute: f64,
    pub write: f64,
    pub fsync: f64,
}

pub const NVME_SHARES: PhaseShares = PhaseShares {
    compute: 0.477,
    write: 0.063,
    fsync: 0.460,
};

/// Band the calibrated sync run must land in.
pub const FSYNC_BAND: (f64, f64) = (40.0, 55.0);

/// Distance in percentage points from the target fsync share beyond which
/// the sync run is repeated with a profile solved from that run.
const RESOLVE_TOLERANCE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileName {
    NvmeSim,
}

impl FromStr for ProfileName {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nvme-sim" | "nvme" => Ok(ProfileName::NvmeSim),
            other => bail!("unknown profile '{other}' (nvme-sim)"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviceProfile {
    pub write_latency_us_per_mib: u64,
    pub fsync_latency_us: u64,
    /// Compute seconds per compaction output MiB observed by calibration.
    pub compute_s_per_mib: f64,
    pub shares: PhaseShares,
}

impl DeviceProfile {
    /// Latencies that give `shares` for a compaction that computes for
    /// `compute_s_per_mib` per output MiB and issues one fsync per
    /// `mib_per_fsync` of output.
    pub fn solve(compute_s_per_mib: f64, mib_per_fsync: f64, shares: PhaseShares) -> Self {
        let write_s_per_mib = compute_s_per_mib * shares.write / shares.compute;
        let fsync_s = compute_s_per_mib * mib_per_fsync * shares.fsync / shares.compute;
        DeviceProfile {
            write_latency_us_per_mib: (write_s_per_mib * 1e6).round() as u64,
            fsync_latency_us: (fsync_s * 1e6).round().max(1.0) as u64,
            compute_s_per_mib,
            shares,
        }
    }

    pub fn apply(&self, cfg: &mut EngineConfig) {
        cfg.io_backend = IoBackendKind::SimulatedLatency;
        cfg.sim_write_latency_per_mib = Duration::from_micros(self.write_latency_us_per_mib);
        cfg.sim_fsync_latency = Duration::from_micros(self.fsync_latency_us);
    }
}

fn run_fresh(
    dir: &Path,
    cfg: &EngineConfig,
    spec: &WorkloadSpec,
    verbose: bool,
) -> Result<RunReport> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    let db = Db::open(dir, cfg.clone())?;
    let every = verbose.then(|| Duration::from_secs(10));
    let report = run_workload_with_progress(&db, spec, every)?;
    db.close()?;
    std::fs::remove_dir_all(dir)?;
    Ok(report)
}

/// Solves a profile from a finished synchronous run: compute and commit
/// time per output MiB and output MiB per fsync, as observed.
pub fn solve_from_run(r: &RunReport) -> Result<DeviceProfile> {
    let out_mib = r.metrics.compaction_write_bytes as f64 / MIB;
    if r.compactions == 0 || out_mib <= 0.0 {
        bail!("calibration run ran no compaction; raise the pilot volume");
    }
    let compute = r.phases.compute_s + r.phases.commit_s;
    let mib_per_fsync = out_mib / r.metrics.compaction_output_files.max(1) as f64;
    Ok(DeviceProfile::solve(compute / out_mib, mib_per_fsync, NVME_SHARES))
}

/// Two synchronous pilots of `pilot_bytes`: one on a zero-latency device
/// for a first estimate, then one on that estimate. The second matters
/// because compaction compute slows down when it shares the CPU with
/// unstalled writers, which the zero-latency pilot overstates.
pub fn calibrate(
    base: &EngineConfig,
    workdir: &Path,
    pilot_bytes: u64,
    spec: &WorkloadSpec,
) -> Result<DeviceProfile> {
    let mut cfg = base.clone();
    cfg.compaction_mode = CompactionMode::Synchronous;
    DeviceProfile::solve(0.0, 0.0, NVME_SHARES).apply(&mut cfg);
    let mut pilot = spec.clone();
    pilot.num_ops = (pilot_bytes / (spec.value_size + spec.key_size) as u64).max(1);
    pilot.kind = WorkloadKind::FillRandom;
    let first = solve_from_run(&run_fresh(&workdir.join("calibrate"), &cfg, &pilot, false)?)?;
    first.apply(&mut cfg);
    solve_from_run(&run_fresh(&workdir.join("calibrate"), &cfg, &pilot, false)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct AbReport {
    pub profile: DeviceProfile,
    pub sync: RunReport,
    pub r#async: RunReport,
    /// Async throughput over sync throughput.
    pub throughput_ratio: f64,
    /// Async stall time over sync stall time.
    pub stall_ratio: f64,
    pub p99_ratio: f64,
    /// fsync share of the synchronous run's compaction time, percent.
    pub sync_fsync_pct: f64,
    pub calibrated: bool,
}

impl AbReport {
    pub fn to_table(&self) -> String {
        format!(
            "device: write {} us/MiB, fsync {} us (compute {:.3} s per output MiB)\n\
             sync compaction split: compute {:.1}%, write {:.1}%, fsync {:.1}% (band {}-{}%: {})\n\
             \n--- synchronous compaction ---\n{}\n--- asynchronous compaction ---\n{}\n\
             throughput ratio (async/sync): {:.3}\n\
             stall ratio (async/sync):      {:.3}\n\
             p99 ratio (async/sync):        {:.3}\n",
            self.profile.write_latency_us_per_mib,
            self.profile.fsync_latency_us,
            self.profile.compute_s_per_mib,
            self.sync.phases.compute_pct,
            self.sync.phases.write_pct,
            self.sync.phases.fsync_pct,
            FSYNC_BAND.0,
            FSYNC_BAND.1,
            if self.calibrated { "ok" } else { "MISSED" },
            self.sync.to_table(),
            self.r#async.to_table(),
            self.throughput_ratio,
            self.stall_ratio,
            self.p99_ratio,
        )
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else if a > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Runs `spec` once per compaction mode on the same simulated device.
pub fn ab_compare(
    base: &EngineConfig,
    profile: &DeviceProfile,
    spec: &WorkloadSpec,
    workdir: &Path,
    verbose: bool,
) -> Result<AbReport> {
    let mut profile = profile.clone();
    let mut cfg = base.clone();
    profile.apply(&mut cfg);
    cfg.compaction_mode = CompactionMode::Synchronous;
    if verbose {
        eprintln!("sync-compaction run");
    }
    let mut sync = run_fresh(&workdir.join("sync"), &cfg, spec, verbose)?;
    if (sync.phases.fsync_pct - 100.0 * NVME_SHARES.fsync).abs() > RESOLVE_TOLERANCE {
        // The pilot did not transfer to the full volume; re-solve from the
        // full run itself and repeat it once.
        profile = solve_from_run(&sync)?;
        profile.apply(&mut cfg);
        if verbose {
            eprintln!(
                "fsync share {:.1}% off target; repeating with fsync {} us",
                sync.phases.fsync_pct, profile.fsync_latency_us
            );
        }
        sync = run_fresh(&workdir.join("sync"), &cfg, spec, verbose)?;
    }
    cfg.compaction_mode = CompactionMode::Asynchronous;
    if verbose {
        eprintln!("async-compaction run");
    }
    let asynch = run_fresh(&workdir.join("async"), &cfg, spec, verbose)?;
    let fsync_pct = sync.phases.fsync_pct;
    Ok(AbReport {
        profile,
        throughput_ratio: ratio(asynch.throughput_ops_s, sync.throughput_ops_s),
        stall_ratio: ratio(asynch.stall_time_s, sync.stall_time_s),
        p99_ratio: ratio(asynch.p99_latency_us, sync.p99_latency_us),
        sync_fsync_pct: fsync_pct,
        calibrated: in_band(fsync_pct),
        sync,
        r#async: asynch,
    })
}

fn in_band(pct: f64) -> bool {
    (FSYNC_BAND.0..=FSYNC_BAND.1).contains(&pct)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solved_profile_reproduces_target_shares() {
        // 0.1 s of compute per output MiB, 8 MiB files.
        let p = DeviceProfile::solve(0.1, 8.0, NVME_SHARES);
        let compute = 0.1 * 8.0;
        let write = p.write_latency_us_per_mib as f64 / 1e6 * 8.0;
        let fsync = p.fsync_latency_us as f64 / 1e6;
        let total = compute + write + fsync;
        assert!((fsync / total - 0.46).abs() < 1e-3, "{}", fsync / total);
        assert!((write / total - 0.063).abs() < 1e-3);
    }
}
