//! Engine configuration and the `key=value` config-file format.

use std::str::FromStr;
use std::time::Duration;

use serde::Serialize;

use crate::error::{Error, Result};

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * KIB;
pub const GIB: u64 = 1024 * MIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IoBackendKind {
    /// Every request completes before `submit` returns.
    Sync,
    /// Requests run on background I/O workers.
    Async,
    /// Real file operations with completion delivery delayed by a latency model.
    SimulatedLatency,
}

impl FromStr for IoBackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(IoBackendKind::Sync),
            "async" => Ok(IoBackendKind::Async),
            "sim" | "simulated" => Ok(IoBackendKind::SimulatedLatency),
            other => Err(Error::Config(format!("unknown io backend '{other}'"))),
        }
    }
}

/// How a compaction treats its output files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CompactionMode {
    /// Wait for every buffer write, fsync every output file as it fills and
    /// delete inputs at the end of the job.
    Synchronous,
    /// Submit writes without waiting, wait once for all writes, submit one
    /// fsync batch that is not awaited and defer input deletion to the
    /// durability ledger.
    Asynchronous,
}

impl FromStr for CompactionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" | "synchronous" => Ok(CompactionMode::Synchronous),
            "async" | "asynchronous" => Ok(CompactionMode::Asynchronous),
            other => Err(Error::Config(format!("unknown compaction mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EngineConfig {
    pub memtable_limit: u64,
    pub sst_target_size: u64,
    /// Size of each write buffer handed to the I/O engine.
    pub merge_buffer_size: u64,
    pub block_size: u64,
    pub l0_compaction_trigger: usize,
    pub level_size_ratio: u64,
    /// Byte capacity of level 1.
    pub base_level_size: u64,
    pub num_levels: u32,
    pub compaction_threads: usize,
    pub max_immutable_memtables: usize,
    pub io_backend: IoBackendKind,
    pub compaction_mode: CompactionMode,
    pub sim_write_latency_per_mib: Duration,
    pub sim_fsync_latency: Duration,
    pub wal_fsync_each_write: bool,
    pub direct_io_poll: bool,
    pub max_value_size: usize,
    pub io_queue_depth: usize,
    pub io_workers: usize,
    /// Pending ledger entries older than this are retired by the sweep.
    pub outlier_max_age: Duration,
    /// Period of the background sweep; `None` disables the timer thread.
    pub sweep_interval: Option<Duration>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            memtable_limit: 64 * MIB,
            sst_target_size: 64 * MIB,
            merge_buffer_size: MIB,
            block_size: 4 * KIB,
            l0_compaction_trigger: 4,
            level_size_ratio: 10,
            base_level_size: 256 * MIB,
            num_levels: 7,
            compaction_threads: 1,
            max_immutable_memtables: 1,
            io_backend: IoBackendKind::Async,
            compaction_mode: CompactionMode::Asynchronous,
            sim_write_latency_per_mib: Duration::ZERO,
            sim_fsync_latency: Duration::ZERO,
            wal_fsync_each_write: false,
            direct_io_poll: false,
            max_value_size: MIB as usize,
            io_queue_depth: 256,
            io_workers: 2,
            outlier_max_age: Duration::from_secs(30),
            sweep_interval: Some(Duration::from_secs(5)),
        }
    }
}

impl EngineConfig {
    /// Scaled-down geometry (8 MiB memtable and SST, 32 MiB level 1) that
    /// keeps the 1:1:10 proportions of the defaults.
    pub fn desk_scale() -> Self {
        EngineConfig {
            memtable_limit: 8 * MIB,
            sst_target_size: 8 * MIB,
            base_level_size: 32 * MIB,
            ..EngineConfig::default()
        }
    }

    /// Tiny geometry for unit and crash tests.
    pub fn tiny() -> Self {
        EngineConfig {
            memtable_limit: 64 * KIB,
            sst_target_size: 32 * KIB,
            merge_buffer_size: 8 * KIB,
            base_level_size: 128 * KIB,
            io_workers: 1,
            max_value_size: 4 * KIB as usize,
            sweep_interval: None,
            ..EngineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("memtable_limit", self.memtable_limit),
            ("sst_target_size", self.sst_target_size),
            ("merge_buffer_size", self.merge_buffer_size),
            ("block_size", self.block_size),
            ("base_level_size", self.base_level_size),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if self.merge_buffer_size > self.sst_target_size {
            return Err(Error::Config(
                "merge_buffer_size must not exceed sst_target_size".into(),
            ));
        }
        if self.level_size_ratio < 2 {
            return Err(Error::Config("level_size_ratio must be >= 2".into()));
        }
        if self.l0_compaction_trigger == 0 || self.compaction_threads == 0 {
            return Err(Error::Config(
                "l0_compaction_trigger and compaction_threads must be > 0".into(),
            ));
        }
        if self.num_levels < 2 {
            return Err(Error::Config("num_levels must be >= 2".into()));
        }
        if self.max_immutable_memtables == 0 || self.io_queue_depth == 0 || self.io_workers == 0 {
            return Err(Error::Config(
                "max_immutable_memtables, io_queue_depth and io_workers must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Writers stall once level 0 holds more files than this.
    pub fn l0_stall_threshold(&self) -> usize {
        2 * self.l0_compaction_trigger
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("bad boolean '{v}' for {key}"))),
            }
        }
        match key {
            "memtable_limit" => self.memtable_limit = num(key, value)?,
            "sst_target_size" => self.sst_target_size = num(key, value)?,
            "merge_buffer_size" => self.merge_buffer_size = num(key, value)?,
            "block_size" => self.block_size = num(key, value)?,
            "l0_compaction_trigger" => self.l0_compaction_trigger = num(key, value)?,
            "level_size_ratio" => self.level_size_ratio = num(key, value)?,
            "base_level_size" => self.base_level_size = num(key, value)?,
            "num_levels" => self.num_levels = num(key, value)?,
            "compaction_threads" => self.compaction_threads = num(key, value)?,
            "max_immutable_memtables" => self.max_immutable_memtables = num(key, value)?,
            "io.backend" => self.io_backend = value.parse()?,
            "compaction.mode" => self.compaction_mode = value.parse()?,
            "io.sim_write_latency_us_per_mib" => {
                self.sim_write_latency_per_mib = Duration::from_micros(num(key, value)?)
            }
            "io.sim_fsync_latency_us" => {
                self.sim_fsync_latency = Duration::from_micros(num(key, value)?)
            }
            "io.direct_poll" => self.direct_io_poll = flag(key, value)?,
            "io.queue_depth" => self.io_queue_depth = num(key, value)?,
            "io.workers" => self.io_workers = num(key, value)?,
            "wal_fsync_each_write" => self.wal_fsync_each_write = flag(key, value)?,
            "max_value_size" => self.max_value_size = num(key, value)?,
            "ledger.max_age_ms" => self.outlier_max_age = Duration::from_millis(num(key, value)?),
            "ledger.sweep_interval_ms" => {
                let ms: u64 = num(key, value)?;
                self.sweep_interval = (ms > 0).then(|| Duration::from_millis(ms));
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a config file of `key = value` lines on top of `self`.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }
}

/// Byte capacity of level `n >= 1`: `base_level_size * ratio^(n-1)`.
pub fn level_capacity(config: &EngineConfig, n: u32) -> Result<u64> {
    if n == 0 {
        return Err(Error::NotApplicable(0));
    }
    let mut cap = config.base_level_size;
    for _ in 1..n {
        cap = cap.saturating_mul(config.level_size_ratio);
    }
    Ok(cap)
}
