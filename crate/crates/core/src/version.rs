//! Immutable read views of the level structure and the set that produces
//! them from MANIFEST edits.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::Result;
use crate::manifest::{Edit, ManifestLog, VersionState};
use crate::memtable::Lookup;
use crate::io::Vfs;
use crate::sstable::{BoxedIter, RecordIter, SstIter, SstReader};
use crate::types::{sst_file_name, Durability, FileId, KvRecord, SeqNo, SstMeta};

pub struct TableHandle {
    pub meta: SstMeta,
    pub reader: Arc<SstReader>,
}

impl std::fmt::Debug for TableHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "sst-{}@L{}", self.meta.file_id, self.meta.level)
    }
}

/// Level 0 is ordered newest first; deeper levels by smallest key.
#[derive(Debug, Clone, Default)]
pub struct Version {
    levels: Vec<Vec<Arc<TableHandle>>>,
}

impl Version {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, n: usize) -> &[Arc<TableHandle>] {
        &self.levels[n]
    }

    pub fn level_bytes(&self, n: usize) -> u64 {
        self.levels[n].iter().map(|t| t.meta.file_size).sum()
    }

    pub fn files(&self) -> impl Iterator<Item = &Arc<TableHandle>> {
        self.levels.iter().flatten()
    }

    pub fn volatile_files(&self) -> Vec<FileId> {
        self.files()
            .filter(|t| t.meta.durability == Durability::Volatile)
            .map(|t| t.meta.file_id)
            .collect()
    }

    pub fn get(&self, user_key: &[u8], snapshot: SeqNo) -> Result<Option<Lookup>> {
        for t in &self.levels[0] {
            if t.meta.contains_user_key(user_key) {
                if let Some(l) = t.reader.get(user_key, snapshot)? {
                    return Ok(Some(l));
                }
            }
        }
        for level in &self.levels[1..] {
            let i = level.partition_point(|t| t.meta.largest.user_key.as_slice() < user_key);
            if let Some(t) = level.get(i) {
                if t.meta.smallest.user_key.as_slice() <= user_key {
                    if let Some(l) = t.reader.get(user_key, snapshot)? {
                        return Ok(Some(l));
                    }
                }
            }
        }
        Ok(None)
    }

    /// One iterator per L0 file and per deeper level, newest first.
    pub fn iters(&self, start: Option<&[u8]>) -> Vec<BoxedIter> {
        let mut out: Vec<BoxedIter> = Vec::new();
        for t in &self.levels[0] {
            out.push(Box::new(table_iter(&t.reader, start)));
        }
        for level in &self.levels[1..] {
            if !level.is_empty() {
                out.push(Box::new(LevelIter::new(level.clone(), start)));
            }
        }
        out
    }
}

fn table_iter(r: &Arc<SstReader>, start: Option<&[u8]>) -> SstIter {
    match start {
        Some(k) => r.iter_from(k),
        None => r.iter(),
    }
}

/// Concatenates the disjoint files of one level.
pub struct LevelIter {
    files: Vec<Arc<TableHandle>>,
    next: usize,
    cur: Option<SstIter>,
    start: Option<Vec<u8>>,
}

impl LevelIter {
    pub fn new(files: Vec<Arc<TableHandle>>, start: Option<&[u8]>) -> Self {
        let next = match start {
            Some(k) => files.partition_point(|t| t.meta.largest.user_key.as_slice() < k),
            None => 0,
        };
        LevelIter {
            files,
            next,
            cur: None,
            start: start.map(|k| k.to_vec()),
        }
    }
}

impl RecordIter for LevelIter {
    fn next_record(&mut self) -> Result<Option<KvRecord>> {
        loop {
            if let Some(it) = &mut self.cur {
                if let Some(r) = it.next_record()? {
                    return Ok(Some(r));
                }
                self.cur = None;
            }
            let Some(t) = self.files.get(self.next) else {
                return Ok(None);
            };
            self.next += 1;
            self.cur = Some(table_iter(&t.reader, self.start.take().as_deref()));
        }
    }
}

/// Owns the MANIFEST and the current version.
pub struct VersionSet {
    vfs: Arc<Vfs>,
    state: VersionState,
    log: ManifestLog,
    current: Arc<Version>,
    readers: HashMap<FileId, Arc<SstReader>>,
}

impl VersionSet {
    /// Installs `state` as a fresh MANIFEST and opens every live table.
    pub fn new(vfs: Arc<Vfs>, state: VersionState) -> Result<Self> {
        let log = ManifestLog::create(vfs.clone(), &state)?;
        let mut vs = VersionSet {
            vfs,
            state,
            log,
            current: Arc::new(Version::default()),
            readers: HashMap::new(),
        };
        let ids: Vec<FileId> = vs.state.live_files().map(|m| m.file_id).collect();
        for id in ids {
            vs.reader(id)?;
        }
        vs.rebuild(&[]);
        Ok(vs)
    }

    pub fn state(&self) -> &VersionState {
        &self.state
    }

    pub fn current(&self) -> Arc<Version> {
        self.current.clone()
    }

    pub fn manifest_records(&self) -> u64 {
        self.log.records()
    }

    /// Opens (or returns the cached) reader for a table file.
    pub fn reader(&mut self, id: FileId) -> Result<Arc<SstReader>> {
        if let Some(r) = self.readers.get(&id) {
            return Ok(r.clone());
        }
        let r = SstReader::open(self.vfs.path(&sst_file_name(id)), id)?;
        self.readers.insert(id, r.clone());
        Ok(r)
    }

    /// Reserves a file id. It is persisted with the next edit batch.
    pub fn new_file_id(&mut self) -> FileId {
        let id = self.state.next_file_id;
        self.state.next_file_id += 1;
        id
    }

    pub fn new_epoch(&mut self) -> u64 {
        let e = self.state.next_epoch;
        self.state.next_epoch += 1;
        e
    }

    /// Makes `edits` durable in the MANIFEST, then applies them.
    pub fn log_and_apply(&mut self, mut edits: Vec<Edit>) -> Result<()> {
        for e in &edits {
            if let Edit::AddFile(m) = e {
                self.reader(m.file_id)?;
            }
        }
        edits.push(Edit::NextFileId(self.state.next_file_id));
        edits.push(Edit::NextEpoch(self.state.next_epoch));
        self.log.append(&edits)?;
        for e in &edits {
            self.state.apply(e)?;
            if let Edit::DeleteFile { file_id, .. } = e {
                self.readers.remove(file_id);
            }
        }
        self.rebuild(&[]);
        Ok(())
    }

    /// Reopens the readers of files whose contents were replaced on disk.
    pub fn reopen(&mut self, ids: &[FileId]) -> Result<()> {
        for id in ids {
            self.readers.remove(id);
            if self.state.find(*id).is_some() {
                self.reader(*id)?;
            }
        }
        self.rebuild(ids);
        Ok(())
    }

    /// Drops a cached reader for a file that is about to be removed.
    pub fn forget_reader(&mut self, id: FileId) {
        self.readers.remove(&id);
    }

    fn rebuild(&mut self, fresh: &[FileId]) {
        let old: HashMap<FileId, Arc<TableHandle>> = self
            .current
            .files()
            .filter(|t| !fresh.contains(&t.meta.file_id))
            .map(|t| (t.meta.file_id, t.clone()))
            .collect();
        let mut levels = Vec::with_capacity(self.state.levels.len());
        for (n, files) in self.state.levels.iter().enumerate() {
            let mut handles: Vec<Arc<TableHandle>> = files
                .values()
                .map(|m| {
                    let reader = match old.get(&m.file_id) {
                        Some(t) if t.meta == *m => return t.clone(),
                        Some(t) => t.reader.clone(),
                        None => self.readers[&m.file_id].clone(),
                    };
                    Arc::new(TableHandle {
                        meta: m.clone(),
                        reader,
                    })
                })
                .collect();
            if n == 0 {
                handles.sort_by(|a, b| b.meta.file_id.cmp(&a.meta.file_id));
            } else {
                handles.sort_by(|a, b| a.meta.smallest.cmp(&b.meta.smallest));
            }
            levels.push(handles);
        }
        self.current = Arc::new(Version { levels });
    }
}
