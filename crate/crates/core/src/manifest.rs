//! MANIFEST: the append-only log of version edits.
//!
//! ```text
//! record : [len u32][body][crc32 u32 over body]
//! body   : [count u16][edit]*
//! edit   : [type u8][payload]
//! ```
//!
//! | type | edit          | payload                                            |
//! |------|---------------|----------------------------------------------------|
//! | 1    | add_file      | file meta                                          |
//! | 2    | delete_file   | [file_id u64][level u32]                           |
//! | 3    | mark_durable  | [file_id u64]                                      |
//! | 4    | ledger_open   | [epoch u64][is_bottom u8][target u64][block u32]   |
//! |      |               | [n u32][parent meta]* [m u32][offspring meta]*     |
//! | 5    | ledger_close  | [epoch u64]                                        |
//! | 6    | log_number    | [u64]                                              |
//! | 7    | last_seqno    | [u64]                                              |
//! | 8    | next_file_id  | [u64]                                              |
//! | 9    | next_epoch    | [u64]                                              |
//!
//! One record is one atomic edit batch. Replay stops at the first short or
//! mismatching record; the file is then rewritten as a fresh snapshot.

use std::collections::BTreeMap;
use std::fs;
use std::sync::Arc;

use crate::codec::{put_u16, put_u32, put_u64, put_u8, Cursor};
use crate::error::{Error, Result};
use crate::io::{Vfs, VfsFile};
use crate::types::{Durability, EpochId, FileId, SeqNo, SstMeta, MANIFEST_FILE};

const TMP_FILE: &str = "MANIFEST.tmp";

/// An open compaction epoch: inputs removed from the version whose files
/// are kept until every output is durable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRecord {
    pub epoch: EpochId,
    pub parents: Vec<SstMeta>,
    pub offspring: Vec<SstMeta>,
    /// Outputs went to the last level, so tombstones were dropped.
    pub is_bottom: bool,
    /// Output sizing used, so the outputs can be rebuilt identically.
    pub target_size: u64,
    pub block_size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Edit {
    AddFile(SstMeta),
    DeleteFile { file_id: FileId, level: u32 },
    MarkDurable { file_id: FileId },
    LedgerOpen(LedgerRecord),
    LedgerClose { epoch: EpochId },
    LogNumber(u64),
    LastSeqno(SeqNo),
    NextFileId(FileId),
    NextEpoch(EpochId),
}

fn put_metas(buf: &mut Vec<u8>, metas: &[SstMeta]) {
    put_u32(buf, metas.len() as u32);
    for m in metas {
        m.encode_into(buf);
    }
}

fn metas(cur: &mut Cursor<'_>) -> Result<Vec<SstMeta>> {
    let n = cur.u32()? as usize;
    (0..n).map(|_| SstMeta::decode_from(cur)).collect()
}

impl Edit {
    pub fn encode_into(&self, buf: &mut Vec<u8>) {
        match self {
            Edit::AddFile(m) => {
                put_u8(buf, 1);
                m.encode_into(buf);
            }
            Edit::DeleteFile { file_id, level } => {
                put_u8(buf, 2);
                put_u64(buf, *file_id);
                put_u32(buf, *level);
            }
            Edit::MarkDurable { file_id } => {
                put_u8(buf, 3);
                put_u64(buf, *file_id);
            }
            Edit::LedgerOpen(r) => {
                put_u8(buf, 4);
                put_u64(buf, r.epoch);
                put_u8(buf, r.is_bottom as u8);
                put_u64(buf, r.target_size);
                put_u32(buf, r.block_size);
                put_metas(buf, &r.parents);
                put_metas(buf, &r.offspring);
            }
            Edit::LedgerClose { epoch } => {
                put_u8(buf, 5);
                put_u64(buf, *epoch);
            }
            Edit::LogNumber(v) => {
                put_u8(buf, 6);
                put_u64(buf, *v);
            }
            Edit::LastSeqno(v) => {
                put_u8(buf, 7);
                put_u64(buf, *v);
            }
            Edit::NextFileId(v) => {
                put_u8(buf, 8);
                put_u64(buf, *v);
            }
            Edit::NextEpoch(v) => {
                put_u8(buf, 9);
                put_u64(buf, *v);
            }
        }
    }

    fn decode_from(cur: &mut Cursor<'_>) -> Result<Self> {
        Ok(match cur.u8()? {
            1 => Edit::AddFile(SstMeta::decode_from(cur)?),
            2 => Edit::DeleteFile {
                file_id: cur.u64()?,
                level: cur.u32()?,
            },
            3 => Edit::MarkDurable { file_id: cur.u64()? },
            4 => {
                let epoch = cur.u64()?;
                let is_bottom = cur.u8()? != 0;
                let target_size = cur.u64()?;
                let block_size = cur.u32()?;
                let parents = metas(cur)?;
                let offspring = metas(cur)?;
                Edit::LedgerOpen(LedgerRecord {
                    epoch,
                    parents,
                    offspring,
                    is_bottom,
                    target_size,
                    block_size,
                })
            }
            5 => Edit::LedgerClose { epoch: cur.u64()? },
            6 => Edit::LogNumber(cur.u64()?),
            7 => Edit::LastSeqno(cur.u64()?),
            8 => Edit::NextFileId(cur.u64()?),
            9 => Edit::NextEpoch(cur.u64()?),
            t => return Err(Error::corrupt(format!("unknown manifest edit type {t}"))),
        })
    }
}

/// Encodes one atomic batch.
pub fn encode_record(edits: &[Edit]) -> Vec<u8> {
    assert!(edits.len() <= u16::MAX as usize, "edit batch too large");
    let mut body = Vec::new();
    put_u16(&mut body, edits.len() as u16);
    for e in edits {
        e.encode_into(&mut body);
    }
    let mut out = Vec::with_capacity(body.len() + 8);
    put_u32(&mut out, body.len() as u32);
    out.extend_from_slice(&body);
    put_u32(&mut out, crc32fast::hash(&body));
    out
}

/// Decoded records plus the length of the valid prefix.
pub fn decode_records(data: &[u8]) -> (Vec<Vec<Edit>>, usize) {
    let mut out = Vec::new();
    let mut pos = 0usize;
    while data.len() - pos >= 4 {
        let len = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
        let start = pos + 4;
        if data.len() - start < len + 4 {
            break;
        }
        let body = &data[start..start + len];
        let crc = u32::from_le_bytes(data[start + len..start + len + 4].try_into().unwrap());
        if crc32fast::hash(body) != crc {
            break;
        }
        let mut cur = Cursor::new(body);
        let parsed = (|| -> Result<Vec<Edit>> {
            let n = cur.u16()? as usize;
            let edits = (0..n).map(|_| Edit::decode_from(&mut cur)).collect::<Result<Vec<_>>>()?;
            if !cur.is_empty() {
                return Err(Error::corrupt("trailing bytes in manifest record"));
            }
            Ok(edits)
        })();
        match parsed {
            Ok(edits) => out.push(edits),
            Err(_) => break,
        }
        pos = start + len + 4;
    }
    (out, pos)
}

/// Durable engine state reconstructed from the MANIFEST.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionState {
    pub levels: Vec<BTreeMap<FileId, SstMeta>>,
    pub ledger: BTreeMap<EpochId, LedgerRecord>,
    /// WAL segments below this id are obsolete.
    pub log_number: u64,
    pub last_seqno: SeqNo,
    pub next_file_id: FileId,
    pub next_epoch: EpochId,
}

impl VersionState {
    pub fn new(num_levels: usize) -> Self {
        VersionState {
            levels: vec![BTreeMap::new(); num_levels],
            ledger: BTreeMap::new(),
            log_number: 0,
            last_seqno: 0,
            next_file_id: 1,
            next_epoch: 1,
        }
    }

    pub fn apply(&mut self, edit: &Edit) -> Result<()> {
        match edit {
            Edit::AddFile(m) => {
                let lvl = m.level as usize;
                if lvl >= self.levels.len() {
                    return Err(Error::corrupt(format!("file {} at level {lvl}", m.file_id)));
                }
                if self.find(m.file_id).is_some() {
                    return Err(Error::corrupt(format!("file {} added twice", m.file_id)));
                }
                self.levels[lvl].insert(m.file_id, m.clone());
                self.next_file_id = self.next_file_id.max(m.file_id + 1);
            }
            Edit::DeleteFile { file_id, level } => {
                let removed = self
                    .levels
                    .get_mut(*level as usize)
                    .and_then(|l| l.remove(file_id));
                if removed.is_none() {
                    return Err(Error::corrupt(format!("delete of unknown file {file_id}")));
                }
            }
            Edit::MarkDurable { file_id } => {
                for level in &mut self.levels {
                    if let Some(m) = level.get_mut(file_id) {
                        m.durability = Durability::Durable;
                    }
                }
                for rec in self.ledger.values_mut() {
                    for m in rec.offspring.iter_mut().chain(rec.parents.iter_mut()) {
                        if m.file_id == *file_id {
                            m.durability = Durability::Durable;
                        }
                    }
                }
            }
            Edit::LedgerOpen(r) => {
                if self.ledger.insert(r.epoch, r.clone()).is_some() {
                    return Err(Error::corrupt(format!("epoch {} opened twice", r.epoch)));
                }
                self.next_epoch = self.next_epoch.max(r.epoch + 1);
            }
            Edit::LedgerClose { epoch } => {
                self.ledger.remove(epoch);
            }
            Edit::LogNumber(v) => self.log_number = self.log_number.max(*v),
            Edit::LastSeqno(v) => self.last_seqno = self.last_seqno.max(*v),
            Edit::NextFileId(v) => self.next_file_id = self.next_file_id.max(*v),
            Edit::NextEpoch(v) => self.next_epoch = self.next_epoch.max(*v),
        }
        Ok(())
    }

    pub fn find(&self, file_id: FileId) -> Option<&SstMeta> {
        self.levels.iter().find_map(|l| l.get(&file_id))
    }

    pub fn live_files(&self) -> impl Iterator<Item = &SstMeta> {
        self.levels.iter().flat_map(|l| l.values())
    }

    /// Edits that rebuild this state from scratch.
    pub fn snapshot(&self) -> Vec<Edit> {
        let mut edits = vec![
            Edit::LogNumber(self.log_number),
            Edit::LastSeqno(self.last_seqno),
            Edit::NextFileId(self.next_file_id),
            Edit::NextEpoch(self.next_epoch),
        ];
        edits.extend(self.live_files().cloned().map(Edit::AddFile));
        edits.extend(self.ledger.values().cloned().map(Edit::LedgerOpen));
        edits
    }

    /// Files at levels >= 1 must not overlap within their level.
    pub fn check_disjoint(&self) -> Result<()> {
        for (lvl, files) in self.levels.iter().enumerate().skip(1) {
            let mut sorted: Vec<&SstMeta> = files.values().collect();
            sorted.sort_by(|a, b| a.smallest.cmp(&b.smallest));
            for w in sorted.windows(2) {
                if w[0].largest.user_key >= w[1].smallest.user_key {
                    return Err(Error::corrupt(format!(
                        "level {lvl}: files {} and {} overlap",
                        w[0].file_id, w[1].file_id
                    )));
                }
            }
        }
        Ok(())
    }
}

pub struct ManifestReplay {
    pub state: VersionState,
    pub records: usize,
    /// A damaged tail was ignored.
    pub torn: bool,
}

/// Reads the MANIFEST, if any, into a state.
pub fn replay(vfs: &Vfs, num_levels: usize) -> Result<Option<ManifestReplay>> {
    let data = match fs::read(vfs.path(MANIFEST_FILE)) {
        Ok(d) => d,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let (records, valid) = decode_records(&data);
    let mut state = VersionState::new(num_levels);
    for edits in &records {
        for e in edits {
            state.apply(e)?;
        }
    }
    Ok(Some(ManifestReplay {
        state,
        records: records.len(),
        torn: valid < data.len(),
    }))
}

/// Appender for the live MANIFEST. Every append is synced before return.
pub struct ManifestLog {
    vfs: Arc<Vfs>,
    file: Arc<VfsFile>,
    records: u64,
}

impl ManifestLog {
    /// Writes `state` as a fresh MANIFEST and atomically installs it.
    pub fn create(vfs: Arc<Vfs>, state: &VersionState) -> Result<Self> {
        let tmp = vfs.create(TMP_FILE)?;
        let edits = state.snapshot();
        let mut data = Vec::new();
        for chunk in edits.chunks(u16::MAX as usize) {
            data.extend(encode_record(chunk));
        }
        vfs.append(&tmp, &data)?;
        vfs.sync(&tmp)?;
        tmp.close();
        vfs.rename(TMP_FILE, MANIFEST_FILE)?;
        let file = vfs.open_existing(MANIFEST_FILE)?;
        Ok(ManifestLog {
            vfs,
            file,
            records: 1,
        })
    }

    pub fn append(&mut self, edits: &[Edit]) -> Result<()> {
        let rec = encode_record(edits);
        self.vfs.append(&self.file, &rec)?;
        self.vfs.sync(&self.file)?;
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{InternalKey, ValueKind};
    use proptest::prelude::*;

    fn meta(id: FileId, level: u32, lo: &str, hi: &str) -> SstMeta {
        SstMeta {
            file_id: id,
            level,
            smallest: InternalKey::new(lo.as_bytes().to_vec(), 5, ValueKind::Put),
            largest: InternalKey::new(hi.as_bytes().to_vec(), 1, ValueKind::Put),
            file_size: 1000 + id,
            durability: Durability::Volatile,
            birth_epoch: 0,
            checksum: id as u32 * 7,
            record_count: 10,
        }
    }

    #[test]
    fn records_round_trip_and_torn_tail_is_dropped() {
        let a = vec![Edit::AddFile(meta(1, 0, "a", "c")), Edit::LastSeqno(9)];
        let b = vec![
            Edit::LedgerOpen(LedgerRecord {
                epoch: 3,
                parents: vec![meta(1, 0, "a", "c")],
                offspring: vec![meta(2, 1, "a", "c")],
                is_bottom: true,
                target_size: 4096,
                block_size: 512,
            }),
            Edit::DeleteFile { file_id: 1, level: 0 },
            Edit::AddFile(meta(2, 1, "a", "c")),
        ];
        let mut data = encode_record(&a);
        data.extend(encode_record(&b));
        let full = data.len();
        data.extend(&encode_record(&[Edit::LedgerClose { epoch: 3 }])[..7]);
        let (recs, valid) = decode_records(&data);
        assert_eq!(recs, vec![a, b]);
        assert_eq!(valid, full);

        let mut bad = data[..full].to_vec();
        bad[full - 3] ^= 1;
        let (recs, _) = decode_records(&bad);
        assert_eq!(recs.len(), 1);
    }

    #[test]
    fn state_rejects_inconsistent_edits() {
        let mut s = VersionState::new(3);
        s.apply(&Edit::AddFile(meta(1, 1, "a", "c"))).unwrap();
        assert!(s.apply(&Edit::AddFile(meta(1, 2, "x", "y"))).is_err());
        assert!(s.apply(&Edit::DeleteFile { file_id: 9, level: 1 }).is_err());
        assert!(s.apply(&Edit::AddFile(meta(2, 7, "a", "c"))).is_err());
        s.apply(&Edit::AddFile(meta(3, 1, "b", "d"))).unwrap();
        assert!(s.check_disjoint().is_err());
        assert_eq!(s.next_file_id, 4);
    }

    #[test]
    fn log_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let vfs = Vfs::new(dir.path()).unwrap();
        let mut state = VersionState::new(4);
        let mut log = ManifestLog::create(vfs.clone(), &state).unwrap();
        let edits = [Edit::AddFile(meta(5, 2, "k", "m")), Edit::LogNumber(4)];
        log.append(&edits).unwrap();
        for e in &edits {
            state.apply(e).unwrap();
        }
        log.append(&[Edit::MarkDurable { file_id: 5 }]).unwrap();
        state.apply(&Edit::MarkDurable { file_id: 5 }).unwrap();
        let r = replay(&vfs, 4).unwrap().unwrap();
        assert_eq!(r.state, state);
        assert!(!r.torn);
        assert_eq!(r.state.find(5).unwrap().durability, Durability::Durable);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Add(u32, u8),
        Delete(usize),
        Durable(usize),
        Open(usize),
        Close(usize),
        Seq(u64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u32..4, any::<u8>()).prop_map(|(l, k)| Op::Add(l, k)),
            any::<usize>().prop_map(Op::Delete),
            any::<usize>().prop_map(Op::Durable),
            any::<usize>().prop_map(Op::Open),
            any::<usize>().prop_map(Op::Close),
            (0u64..1000).prop_map(Op::Seq),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn replay_equals_in_memory_state(ops in prop::collection::vec(op(), 1..60), split in 1usize..5) {
            let dir = tempfile::tempdir().unwrap();
            let vfs = Vfs::new(dir.path()).unwrap();
            vfs.set_real_sync(false);
            let mut state = VersionState::new(4);
            let mut log = ManifestLog::create(vfs.clone(), &state).unwrap();
            let mut batch = Vec::new();
            let mut next_id = 1;
            for (i, o) in ops.iter().enumerate() {
                let live: Vec<SstMeta> = state.live_files().cloned().collect();
                let open: Vec<EpochId> = state.ledger.keys().copied().collect();
                let e = match o {
                    Op::Add(l, k) => {
                        next_id += 1;
                        let key = format!("{k:03}");
                        Edit::AddFile(meta(next_id, *l, &key, &key))
                    }
                    Op::Delete(i) if !live.is_empty() => {
                        let m = &live[i % live.len()];
                        Edit::DeleteFile { file_id: m.file_id, level: m.level }
                    }
                    Op::Durable(i) if !live.is_empty() => {
                        Edit::MarkDurable { file_id: live[i % live.len()].file_id }
                    }
                    Op::Open(i) => Edit::LedgerOpen(LedgerRecord {
                        epoch: state.next_epoch,
                        parents: live.iter().skip(i % (live.len() + 1)).take(2).cloned().collect(),
                        offspring: vec![],
                        is_bottom: i % 2 == 0,
                        target_size: 1,
                        block_size: 1,
                    }),
                    Op::Close(i) if !open.is_empty() => Edit::LedgerClose { epoch: open[i % open.len()] },
                    _ => Edit::LastSeqno(i as u64),
                };
                if let Op::Seq(s) = o {
                    state.apply(&Edit::LastSeqno(*s)).unwrap();
                    batch.push(Edit::LastSeqno(*s));
                } else {
                    state.apply(&e).unwrap();
                    batch.push(e);
                }
                if batch.len() >= split {
                    log.append(&batch).unwrap();
                    batch.clear();
                }
            }
            log.append(&batch).unwrap();
            let r = replay(&vfs, 4).unwrap().unwrap();
            prop_assert_eq!(&r.state, &state);
            // A rewritten snapshot replays to the same state.
            drop(log);
            ManifestLog::create(vfs.clone(), &r.state).unwrap();
            let again = replay(&vfs, 4).unwrap().unwrap();
            prop_assert_eq!(again.state, state);
        }
    }
}
