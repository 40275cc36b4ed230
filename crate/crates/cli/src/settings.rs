//! Builds an [`EngineConfig`] from command-line options and config files.

use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use deferlsm::{CompactionMode, EngineConfig, IoBackendKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// 64 MiB memtable and SST, 256 MiB level 1.
    Full,
    /// 8 MiB memtable and SST, 32 MiB level 1.
    Desk,
    /// Kilobyte-sized geometry for tests.
    Tiny,
}

impl FromStr for Scale {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Scale::Full,
            "desk" => Scale::Desk,
            "tiny" => Scale::Tiny,
            other => bail!("unknown scale '{other}' (full, desk, tiny)"),
        })
    }
}

impl Scale {
    pub fn config(self) -> EngineConfig {
        match self {
            Scale::Full => EngineConfig::default(),
            Scale::Desk => EngineConfig::desk_scale(),
            Scale::Tiny => EngineConfig::tiny(),
        }
    }
}

/// The compaction mode implied by an I/O backend when none is given: the
/// blocking backend runs synchronous compactions, the others asynchronous.
pub fn default_mode(backend: IoBackendKind) -> CompactionMode {
    match backend {
        IoBackendKind::Sync => CompactionMode::Synchronous,
        _ => CompactionMode::Asynchronous,
    }
}

/// Layers, lowest priority first: scale preset, config file, `key=value`
/// overrides, then the explicit backend and mode flags.
pub fn build_config(
    scale: Scale,
    file: Option<&Path>,
    overrides: &[String],
    backend: Option<IoBackendKind>,
    mode: Option<CompactionMode>,
) -> Result<EngineConfig> {
    let mut cfg = scale.config();
    let mut mode_from_text = false;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        mode_from_text |= text
            .lines()
            .any(|l| l.trim_start().starts_with("compaction.mode"));
        cfg.apply_kv_text(&text)
            .with_context(|| format!("in config file {}", path.display()))?;
    }
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override '{kv}' is not key=value"))?;
        mode_from_text |= k.trim() == "compaction.mode";
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(b) = backend {
        cfg.io_backend = b;
        if !mode_from_text {
            cfg.compaction_mode = default_mode(b);
        }
    }
    if let Some(m) = mode {
        cfg.compaction_mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_implies_mode_unless_overridden() {
        let c = build_config(Scale::Tiny, None, &[], Some(IoBackendKind::Sync), None).unwrap();
        assert_eq!(c.compaction_mode, CompactionMode::Synchronous);
        let c = build_config(Scale::Tiny, None, &[], Some(IoBackendKind::Async), None).unwrap();
        assert_eq!(c.compaction_mode, CompactionMode::Asynchronous);
        let c = build_config(
            Scale::Tiny,
            None,
            &["compaction.mode=async".into()],
            Some(IoBackendKind::Sync),
            None,
        )
        .unwrap();
        assert_eq!(c.compaction_mode, CompactionMode::Asynchronous);
        let c = build_config(
            Scale::Tiny,
            None,
            &[],
            Some(IoBackendKind::SimulatedLatency),
            Some(CompactionMode::Synchronous),
        )
        .unwrap();
        assert_eq!(c.compaction_mode, CompactionMode::Synchronous);
    }

    #[test]
    fn config_file_layers_under_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("engine.conf");
        std::fs::write(
            &path,
            "# sim device\nio.backend = sim\nio.sim_fsync_latency_us = 2000\nmemtable_limit=1048576\n",
        )
        .unwrap();
        let c = build_config(
            Scale::Tiny,
            Some(&path),
            &["memtable_limit=2097152".into()],
            None,
            None,
        )
        .unwrap();
        assert_eq!(c.io_backend, IoBackendKind::SimulatedLatency);
        assert_eq!(c.sim_fsync_latency.as_micros(), 2000);
        assert_eq!(c.memtable_limit, 2 * 1024 * 1024);
        assert!(build_config(Scale::Tiny, None, &["bogus=1".into()], None, None).is_err());
    }
}
