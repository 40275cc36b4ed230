//! Shared fixtures for the criterion benchmarks of `deferlsm`.

use std::time::Duration;

use deferlsm::{CompactionMode, Db, EngineConfig, IoBackendKind, Result};

/// Small geometry on a simulated device, so compactions run within a
/// benchmark iteration.
pub fn bench_config(mode: CompactionMode, fsync: Duration) -> EngineConfig {
    EngineConfig {
        memtable_limit: 256 << 10,
        sst_target_size: 256 << 10,
        merge_buffer_size: 64 << 10,
        base_level_size: 1 << 20,
        io_backend: IoBackendKind::SimulatedLatency,
        sim_fsync_latency: fsync,
        compaction_mode: mode,
        sweep_interval: None,
        ..EngineConfig::default()
    }
}

/// Key `i` of a fixed pseudo-random permutation of `0..2^64`.
pub fn scattered_key(i: u64) -> [u8; 16] {
    let x = i.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29);
    let mut k = [0u8; 16];
    k[..8].copy_from_slice(&x.to_be_bytes());
    k[8..].copy_from_slice(&i.to_be_bytes());
    k
}

/// Writes keys `start..start + n` with `value_size`-byte values.
pub fn fill(db: &Db, start: u64, n: u64, value_size: usize) -> Result<()> {
    let value = vec![0x5au8; value_size];
    for i in start..start + n {
        db.put(&scattered_key(i), &value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scattered_keys_are_distinct() {
        let keys: std::collections::HashSet<_> = (0..10_000).map(scattered_key).collect();
        assert_eq!(keys.len(), 10_000);
    }
}
