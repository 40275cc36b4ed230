use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use deferlsm::{CompactionMode, Db, IoBackendKind};

use deferlsm_cli::ab::{ab_compare, calibrate, ProfileName};
use deferlsm_cli::crashtest::{self, CrashCase, MatrixOptions};
use deferlsm_cli::ledger_cmd;
use deferlsm_cli::settings::{build_config, Scale};
use deferlsm_cli::workload::{run_workload_with_progress, KeyDistribution, WorkloadKind, WorkloadSpec};

#[derive(Parser)]
#[command(name = "bench", about = "deferlsm workload driver and test harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct EngineArgs {
    /// Geometry preset: full, desk or tiny.
    #[arg(long, default_value = "desk")]
    scale: Scale,
    /// key=value engine config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one workload and report throughput, stalls and latencies.
    Run {
        #[arg(long, default_value = "fillrandom")]
        workload: WorkloadKind,
        #[arg(long, default_value_t = 100_000)]
        ops: u64,
        #[arg(long, default_value_t = 1024)]
        value_size: usize,
        #[arg(long, default_value_t = 16)]
        key_size: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// sync, async or sim.
        #[arg(long)]
        backend: Option<IoBackendKind>,
        /// Compaction mode (sync or async); defaults from the backend.
        #[arg(long)]
        mode: Option<CompactionMode>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// uniform, zipfian or latest; defaults per workload.
        #[arg(long)]
        key_dist: Option<KeyDistribution>,
        /// Distinct keys; defaults to --ops.
        #[arg(long)]
        key_space: Option<u64>,
        /// Load the key space sequentially before the measured run.
        #[arg(long)]
        preload: bool,
        /// Database directory; a temporary one is used when absent.
        #[arg(long)]
        db: Option<PathBuf>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Crash-injection matrix.
    Crash {
        /// "all" or a comma-separated list of crash point names.
        #[arg(long, default_value = "all")]
        points: String,
        #[arg(long, default_value_t = 5)]
        reps: u64,
        #[arg(long, default_value_t = 12_000)]
        ops: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    #[command(hide = true)]
    CrashChild {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        case: String,
    },
    /// Synchronous versus asynchronous compaction on a calibrated device.
    Ab {
        #[arg(long, default_value = "nvme-sim")]
        profile: ProfileName,
        /// Bytes of user data to insert per run (suffixes KiB, MiB, GiB).
        #[arg(long, default_value = "2GiB")]
        volume: String,
        #[arg(long, default_value_t = 1024)]
        value_size: usize,
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Volume of the zero-latency calibration pilot.
        #[arg(long, default_value = "256MiB")]
        pilot: String,
        /// Working directory; a temporary one is used when absent.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Retire ledger epochs older than --max-age-ms, then close cleanly.
    LedgerSweep {
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value_t = 0)]
        max_age_ms: u64,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Print the persisted ledger and volatile files without opening the engine.
    LedgerDump {
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value_t = 7)]
        num_levels: u32,
    },
}

/// Parses sizes such as `2GiB`, `256MiB`, `4096`.
fn parse_size(s: &str) -> Result<u64> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num.parse().with_context(|| format!("bad size '{s}'"))?;
    let mult = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kib" | "kb" => 1 << 10,
        "m" | "mib" | "mb" => 1 << 20,
        "g" | "gib" | "gb" => 1 << 30,
        other => bail!("unknown size unit '{other}'"),
    };
    Ok(n * mult)
}

fn write_json(path: &Option<PathBuf>, value: &impl serde::Serialize) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, serde_json::to_vec_pretty(value)?)
            .with_context(|| format!("writing {}", p.display()))?;
        eprintln!("report written to {}", p.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            workload,
            ops,
            value_size,
            key_size,
            threads,
            backend,
            mode,
            seed,
            key_dist,
            key_space,
            preload,
            db,
            out,
            engine,
        } => {
            let cfg = build_config(engine.scale, engine.config.as_deref(), &engine.set, backend, mode)?;
            let tmp;
            let dir = match db {
                Some(d) => {
                    std::fs::create_dir_all(&d)?;
                    d
                }
                None => {
                    tmp = tempfile::tempdir()?;
                    tmp.path().to_path_buf()
                }
            };
            let mut spec = WorkloadSpec::new(workload, ops);
            spec.value_size = value_size;
            spec.key_size = key_size;
            spec.threads = threads;
            spec.seed = seed;
            spec.key_space = key_space;
            if let Some(d) = key_dist {
                spec.key_distribution = d;
            }
            let db = Db::open(&dir, cfg)?;
            if preload {
                let mut load = WorkloadSpec::new(WorkloadKind::Load, spec.key_space());
                load.value_size = value_size;
                load.key_size = key_size;
                load.threads = threads;
                load.seed = seed;
                run_workload_with_progress(&db, &load, None)?;
                db.flush()?;
            }
            let report = run_workload_with_progress(&db, &spec, Some(Duration::from_secs(10)))?;
            db.close()?;
            print!("{}", report.to_table());
            write_json(&out, &report)?;
        }
        Command::Crash {
            points,
            reps,
            ops,
            seed,
            out,
            quiet,
        } => {
            let opts = MatrixOptions {
                points: crashtest::parse_points(&points)?,
                reps,
                seed,
                ops,
                ..MatrixOptions::default()
            };
            let exe = std::env::current_exe()?;
            let work = tempfile::tempdir()?;
            let report = crashtest::run_matrix(&exe, work.path(), &opts, !quiet)?;
            println!(
                "{} cases over {} points: {} passed, {} failed; {} cases crashed at their point ({} points reached) in {:.1}s",
                report.cases.len(),
                report.points,
                report.passed,
                report.failed,
                report.crashed,
                report.points_crashed,
                report.elapsed_s
            );
            write_json(&out, &report)?;
            if report.failed > 0 {
                bail!("{} crash cases failed", report.failed);
            }
        }
        Command::CrashChild { dir, case } => {
            let case: CrashCase = serde_json::from_str(&case)?;
            crashtest::child_main(&dir, &case)?;
        }
        Command::Ab {
            profile,
            volume,
            value_size,
            threads,
            seed,
            pilot,
            dir,
            out,
            engine,
        } => {
            let ProfileName::NvmeSim = profile;
            let base = build_config(engine.scale, engine.config.as_deref(), &engine.set, None, None)?;
            let volume = parse_size(&volume)?;
            let mut spec = WorkloadSpec::new(WorkloadKind::FillRandom, (volume / (value_size + 16) as u64).max(1));
            spec.value_size = value_size;
            spec.threads = threads;
            spec.seed = seed;
            let tmp;
            let work = match dir {
                Some(d) => d,
                None => {
                    tmp = tempfile::tempdir()?;
                    tmp.path().to_path_buf()
                }
            };
            eprintln!("calibrating device profile");
            let dev = calibrate(&base, &work, parse_size(&pilot)?, &spec)?;
            let report = ab_compare(&base, &dev, &spec, &work, true)?;
            print!("{}", report.to_table());
            write_json(&out, &report)?;
        }
        Command::LedgerSweep {
            db,
            max_age_ms,
            engine,
        } => {
            let cfg = build_config(engine.scale, engine.config.as_deref(), &engine.set, None, None)?;
            print!("{}", ledger_cmd::sweep(&db, cfg, Duration::from_millis(max_age_ms))?);
        }
        Command::LedgerDump { db, num_levels } => {
            print!("{}", ledger_cmd::dump(&db, num_levels)?);
        }
    }
    Ok(())
}
