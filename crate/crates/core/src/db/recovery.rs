//! Startup: MANIFEST replay, resolution of open ledger epochs, orphan
//! cleanup and WAL replay.
//!
//! An epoch left open by a crash is resolved, oldest first, as follows:
//!
//! 1. every offspring already marked durable: delete the parents;
//! 2. every offspring verifies (length, footer, checksum): fsync them, mark
//!    them durable, delete the parents;
//! 3. otherwise, if no offspring was consumed by a later epoch and putting
//!    the parents back does not collide with live files: drop the offspring
//!    and reinstate the parents;
//! 4. otherwise rebuild the damaged offspring from the parents under the
//!    same file ids, then continue as in 2.
//!
//! Parents that are missing while an offspring is damaged is reported as
//! [`Error::LedgerCorruption`].

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::Serialize;

use super::build::{rebuild_epoch, regen_name, write_l0};
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::io::{IoEngine, Vfs};
use crate::manifest::{self, Edit, LedgerRecord, VersionState};
use crate::memtable::MemTable;
use crate::sstable::{verify_table, BufferPool};
use crate::types::{
    parse_file_name, sst_file_name, wal_file_name, Durability, FileId, FileKind, SeqNo, SstMeta,
    MANIFEST_FILE,
};
use crate::version::VersionSet;
use crate::wal;

#[derive(Debug, Clone, Default, Serialize)]
pub struct RecoveryReport {
    pub manifest_found: bool,
    pub manifest_torn: bool,
    pub epochs_retired: usize,
    pub epochs_reinstated: usize,
    pub epochs_regenerated: usize,
    pub orphans_removed: usize,
    pub wal_segments: usize,
    pub wal_records: usize,
    pub wal_torn: bool,
    pub last_seqno: SeqNo,
}

pub(crate) struct Recovered {
    pub versions: VersionSet,
    pub wal_segment: FileId,
    pub report: RecoveryReport,
}

fn table_ok(vfs: &Vfs, m: &SstMeta) -> bool {
    let path = vfs.path(&sst_file_name(m.file_id));
    match std::fs::metadata(&path) {
        Ok(md) if md.len() == m.file_size => {}
        _ => return false,
    }
    matches!(verify_table(&path), Ok(f) if f.checksum == m.checksum && f.record_count == m.record_count)
}

fn apply(state: &mut VersionState, edits: impl IntoIterator<Item = Edit>) -> Result<()> {
    for e in edits {
        state.apply(&e)?;
    }
    Ok(())
}

/// Makes the listed offspring durable on disk and in `state`.
fn settle_offspring(vfs: &Vfs, state: &mut VersionState, rec: &LedgerRecord) -> Result<()> {
    for m in &rec.offspring {
        if m.durability == Durability::Volatile {
            let f = vfs.open_existing(&sst_file_name(m.file_id))?;
            vfs.sync(&f)?;
        }
    }
    apply(
        state,
        rec.offspring.iter().map(|m| Edit::MarkDurable { file_id: m.file_id }),
    )
}

fn can_reinstate(vfs: &Vfs, state: &VersionState, rec: &LedgerRecord) -> bool {
    let offspring: BTreeSet<FileId> = rec.offspring.iter().map(|m| m.file_id).collect();
    if rec.offspring.iter().any(|m| state.find(m.file_id).is_none()) {
        return false;
    }
    if !rec.parents.iter().all(|p| table_ok(vfs, p)) {
        return false;
    }
    rec.parents.iter().all(|p| {
        p.level == 0
            || state.levels[p.level as usize].values().all(|live| {
                offspring.contains(&live.file_id)
                    || !live.overlaps(&p.smallest.user_key, &p.largest.user_key)
            })
    })
}

fn resolve_ledger(
    vfs: &Arc<Vfs>,
    io: &IoEngine,
    pool: &Arc<BufferPool>,
    config: &EngineConfig,
    state: &mut VersionState,
    report: &mut RecoveryReport,
    to_delete: &mut Vec<FileId>,
) -> Result<()> {
    let records: Vec<LedgerRecord> = state.ledger.values().cloned().collect();
    for rec in records {
        let epoch = rec.epoch;
        let all_durable = rec.offspring.iter().all(|m| m.durability == Durability::Durable);
        let valid: Vec<bool> = rec.offspring.iter().map(|m| table_ok(vfs, m)).collect();
        if all_durable || valid.iter().all(|v| *v) {
            if !all_durable {
                settle_offspring(vfs, state, &rec)?;
            }
            to_delete.extend(rec.parents.iter().map(|p| p.file_id));
            report.epochs_retired += 1;
        } else if can_reinstate(vfs, state, &rec) {
            let drop_offspring: Vec<Edit> = rec
                .offspring
                .iter()
                .map(|m| Edit::DeleteFile {
                    file_id: m.file_id,
                    level: state.find(m.file_id).map_or(m.level, |l| l.level),
                })
                .collect();
            apply(state, drop_offspring)?;
            apply(
                state,
                rec.parents.iter().map(|p| {
                    Edit::AddFile(SstMeta {
                        durability: Durability::Durable,
                        ..p.clone()
                    })
                }),
            )?;
            to_delete.extend(rec.offspring.iter().map(|m| m.file_id));
            report.epochs_reinstated += 1;
        } else {
            if rec.parents.iter().any(|p| !table_ok(vfs, p)) {
                return Err(Error::LedgerCorruption {
                    epoch,
                    reason: "an offspring is damaged and a parent is missing".into(),
                });
            }
            let queue = io.queue(config.io_queue_depth);
            let rebuilt = rebuild_epoch(vfs, &queue, pool, config.merge_buffer_size as usize, &rec)?;
            for (b, ok) in rebuilt.iter().zip(&valid) {
                let id = b.meta.file_id;
                if *ok {
                    vfs.delete(&regen_name(id))?;
                } else {
                    vfs.rename(&regen_name(id), &sst_file_name(id))?;
                }
            }
            settle_offspring(vfs, state, &rec)?;
            to_delete.extend(rec.parents.iter().map(|p| p.file_id));
            report.epochs_regenerated += 1;
        }
        state.apply(&Edit::LedgerClose { epoch })?;
    }
    Ok(())
}

pub(crate) fn recover(
    vfs: &Arc<Vfs>,
    io: &IoEngine,
    pool: &Arc<BufferPool>,
    config: &EngineConfig,
) -> Result<Recovered> {
    let mut report = RecoveryReport::default();
    for name in vfs.list()? {
        if name.ends_with(".regen") || name == "MANIFEST.tmp" {
            vfs.delete(&name)?;
        }
    }
    let num_levels = config.num_levels as usize;
    let mut state = match manifest::replay(vfs, num_levels)? {
        Some(r) => {
            report.manifest_found = true;
            report.manifest_torn = r.torn;
            r.state
        }
        None => VersionState::new(num_levels),
    };
    if state.levels.len() != num_levels {
        return Err(Error::Config(format!(
            "store has {} levels, config asks for {num_levels}",
            state.levels.len()
        )));
    }

    let mut to_delete = Vec::new();
    resolve_ledger(vfs, io, pool, config, &mut state, &mut report, &mut to_delete)?;

    let live: BTreeSet<FileId> = state.live_files().map(|m| m.file_id).collect();
    let mut max_id = 0;
    let mut wal_segments = Vec::new();
    for name in vfs.list()? {
        match parse_file_name(&name) {
            Some((FileKind::Sst, id)) => {
                max_id = max_id.max(id);
                if !live.contains(&id) && !to_delete.contains(&id) {
                    to_delete.push(id);
                    report.orphans_removed += 1;
                }
            }
            Some((FileKind::Wal, id)) => {
                max_id = max_id.max(id);
                wal_segments.push(id);
            }
            None => {}
        }
    }
    state.next_file_id = state.next_file_id.max(max_id + 1);

    let mut versions = VersionSet::new(vfs.clone(), state)?;
    for id in &to_delete {
        vfs.delete(&sst_file_name(*id))?;
    }

    // WAL replay: contiguous sequence numbers above the durable state.
    wal_segments.sort_unstable();
    let log_number = versions.state().log_number;
    let mut last = versions.state().last_seqno;
    let mem = Arc::new(MemTable::new(0));
    for &seg in wal_segments.iter().filter(|s| **s >= log_number) {
        report.wal_segments += 1;
        let r = wal::replay(vfs, seg)?;
        let mut gap = false;
        for rec in r.records {
            if rec.seqno <= last {
                continue;
            }
            if rec.seqno != last + 1 {
                gap = true;
                break;
            }
            last = rec.seqno;
            report.wal_records += 1;
            mem.insert(rec.into_record());
        }
        if r.torn || gap {
            report.wal_torn = true;
            break;
        }
    }

    let wal_segment = versions.new_file_id();
    let mut edits = vec![Edit::LogNumber(wal_segment), Edit::LastSeqno(last)];
    if !mem.is_empty() {
        let id = versions.new_file_id();
        let queue = io.queue(config.io_queue_depth);
        if let Some(built) = write_l0(
            vfs,
            &queue,
            pool,
            config.block_size as usize,
            config.merge_buffer_size as usize,
            &mem,
            id,
        )? {
            edits.push(Edit::AddFile(SstMeta {
                durability: Durability::Durable,
                ..built.meta
            }));
        }
    }
    versions.log_and_apply(edits)?;
    for seg in wal_segments {
        vfs.delete(&wal_file_name(seg))?;
    }
    debug_assert!(vfs.exists(MANIFEST_FILE));
    report.last_seqno = last;
    Ok(Recovered {
        versions,
        wal_segment,
        report,
    })
}
