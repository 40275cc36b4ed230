//! Run reports: JSON plus a plain-text table.

use std::fmt::Write as _;
use std::time::Duration;

use deferlsm::metrics::{MetricsReport, PhaseBreakdown};
use deferlsm::{CompactionMode, EngineConfig, IoBackendKind};
use serde::Serialize;

use crate::workload::{WorkloadKind, WorkloadSpec};

/// Per-operation latencies in nanoseconds.
#[derive(Default)]
pub struct LatencyRecorder {
    samples: Vec<u64>,
}

impl LatencyRecorder {
    pub fn record(&mut self, d: Duration) {
        self.samples.push(d.as_nanos() as u64);
    }

    pub fn merge(&mut self, other: LatencyRecorder) {
        self.samples.extend(other.samples);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Nearest-rank percentile in microseconds.
    pub fn percentile_us(&self, p: f64) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let mut s = self.samples.clone();
        let rank = ((p / 100.0) * s.len() as f64).ceil().max(1.0) as usize - 1;
        let last = s.len() - 1;
        let (_, v, _) = s.select_nth_unstable(rank.min(last));
        *v as f64 / 1e3
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub workload: WorkloadSpec,
    pub io_backend: IoBackendKind,
    pub compaction_mode: CompactionMode,
    pub total_time_s: f64,
    pub throughput_ops_s: f64,
    pub throughput_mib_s: f64,
    /// Writer stall time accumulated during this run.
    pub stall_time_s: f64,
    pub p50_latency_us: f64,
    pub p99_latency_us: f64,
    pub found: u64,
    pub not_found: u64,
    /// Order-independent digest of the found key indices.
    pub found_digest: u64,
    pub write_amplification: f64,
    pub phases: PhaseBreakdown,
    pub compactions: u64,
    pub fallback_fsync_waits: u64,
    pub metrics: MetricsReport,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        spec: &WorkloadSpec,
        config: &EngineConfig,
        elapsed: Duration,
        latencies: &LatencyRecorder,
        found: u64,
        not_found: u64,
        found_digest: u64,
        bytes: u64,
        before: &MetricsReport,
        after: MetricsReport,
    ) -> Self {
        let secs = elapsed.as_secs_f64().max(1e-9);
        let ops = if spec.kind == WorkloadKind::ReadSeq {
            found as f64
        } else {
            latencies.len() as f64
        };
        let stall = (after.stall_seconds - before.stall_seconds).clamp(0.0, secs);
        RunReport {
            workload: spec.clone(),
            io_backend: config.io_backend,
            compaction_mode: config.compaction_mode,
            total_time_s: secs,
            throughput_ops_s: ops / secs,
            throughput_mib_s: bytes as f64 / (1024.0 * 1024.0) / secs,
            stall_time_s: stall,
            p50_latency_us: latencies.percentile_us(50.0),
            p99_latency_us: latencies.percentile_us(99.0),
            found,
            not_found,
            found_digest,
            write_amplification: after.write_amplification,
            phases: after.phases.clone(),
            compactions: after.compactions_count - before.compactions_count,
            fallback_fsync_waits: after.fallback_fsync_waits - before.fallback_fsync_waits,
            metrics: after,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let rows: Vec<(&str, String)> = vec![
            ("workload", format!("{:?}", self.workload.kind)),
            ("backend / mode", format!("{:?} / {:?}", self.io_backend, self.compaction_mode)),
            ("ops", self.workload.num_ops.to_string()),
            ("threads", self.workload.threads.to_string()),
            ("total time", format!("{:.2} s", self.total_time_s)),
            ("throughput", format!("{:.0} ops/s, {:.2} MiB/s", self.throughput_ops_s, self.throughput_mib_s)),
            ("stall time", format!("{:.2} s", self.stall_time_s)),
            ("latency p50 / p99", format!("{:.1} / {:.1} us", self.p50_latency_us, self.p99_latency_us)),
            ("found / not found", format!("{} / {}", self.found, self.not_found)),
            ("compactions", self.compactions.to_string()),
            ("fallback fsync waits", self.fallback_fsync_waits.to_string()),
            ("write amplification", format!("{:.2}", self.write_amplification)),
            (
                "compaction time split",
                format!(
                    "compute {:.1}%, write {:.1}%, fsync {:.1}%",
                    self.phases.compute_pct, self.phases.write_pct, self.phases.fsync_pct
                ),
            ),
        ];
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<w$}  {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_uses_nearest_rank() {
        let mut r = LatencyRecorder::default();
        for us in 1..=100u64 {
            r.record(Duration::from_micros(us));
        }
        assert_eq!(r.percentile_us(99.0), 99.0);
        assert_eq!(r.percentile_us(50.0), 50.0);
        assert_eq!(r.percentile_us(100.0), 100.0);
        assert_eq!(LatencyRecorder::default().percentile_us(99.0), 0.0);
    }
}
