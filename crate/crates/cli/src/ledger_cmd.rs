//! Inspection and maintenance of the durability ledger.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use deferlsm::io::Vfs;
use deferlsm::manifest;
use deferlsm::types::Durability;
use deferlsm::{Db, EngineConfig};

/// Read-only dump of the persisted ledger and of every volatile file.
pub fn dump(dir: &Path, num_levels: u32) -> Result<String> {
    let vfs = Vfs::new(dir).with_context(|| format!("opening {}", dir.display()))?;
    let replay = manifest::replay(&vfs, num_levels as usize)?
        .with_context(|| format!("no MANIFEST in {}", dir.display()))?;
    let state = &replay.state;
    let mut out = String::new();
    writeln!(
        out,
        "manifest: {} records{}, last seqno {}, next file {}, next epoch {}",
        replay.records,
        if replay.torn { " (torn tail ignored)" } else { "" },
        state.last_seqno,
        state.next_file_id,
        state.next_epoch
    )?;
    writeln!(out, "open epochs: {}", state.ledger.len())?;
    for rec in state.ledger.values() {
        let ids = |v: &[deferlsm::types::SstMeta]| {
            v.iter().map(|m| m.file_id.to_string()).collect::<Vec<_>>().join(",")
        };
        writeln!(
            out,
            "  epoch {:>6}  parents [{}]  offspring [{}]{}",
            rec.epoch,
            ids(&rec.parents),
            ids(&rec.offspring),
            if rec.is_bottom { "  bottom" } else { "" }
        )?;
    }
    let volatile: Vec<_> = state
        .live_files()
        .filter(|m| m.durability == Durability::Volatile)
        .collect();
    writeln!(out, "volatile files: {}", volatile.len())?;
    for m in volatile {
        writeln!(
            out,
            "  file {:>6}  level {}  {} bytes  epoch {}",
            m.file_id, m.level, m.file_size, m.birth_epoch
        )?;
    }
    Ok(out)
}

/// Opens the database, retires every epoch older than `max_age` and closes.
pub fn sweep(dir: &Path, config: EngineConfig, max_age: Duration) -> Result<String> {
    let db = Db::open(dir, config)?;
    let before = db.ledger_summary().len();
    let retired = db.sweep_with(max_age)?;
    let after = db.ledger_summary();
    let mut out = String::new();
    writeln!(out, "open epochs before sweep: {before}")?;
    writeln!(out, "retired: {retired:?}")?;
    writeln!(out, "open epochs after sweep: {}", after.len())?;
    for e in &after {
        writeln!(out, "  epoch {:>6}  {:?}  age {} ms", e.epoch, e.state, e.age_ms)?;
    }
    db.close()?;
    Ok(out)
}
