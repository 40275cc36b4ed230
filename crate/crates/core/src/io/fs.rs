//! File layer that remembers which bytes an fsync has confirmed.
//!
//! Files created by this process are tracked: `len` is the highest byte
//! written, `durable_len` the length covered by the last completed fsync.
//! [`Vfs::power_loss`] rewinds every tracked file to its durable length and
//! removes files that were never synced, which is what a machine crash
//! would leave behind. Files that already existed when they were first
//! touched are treated as fully durable.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

#[derive(Debug, Clone, Copy, Default)]
struct Tracked {
    len: u64,
    durable_len: u64,
    synced: bool,
}

pub struct VfsFile {
    handle: u64,
    name: String,
    path: PathBuf,
    file: File,
    closed: AtomicBool,
}

impl VfsFile {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Process-unique handle id (not the engine file id).
    pub fn handle(&self) -> u64 {
        self.handle
    }

    /// Further writes to a closed file fail.
    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }
}

impl std::fmt::Debug for VfsFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VfsFile").field("name", &self.name).finish()
    }
}

pub struct Vfs {
    root: PathBuf,
    real_sync: AtomicBool,
    next_handle: AtomicU64,
    tracked: Mutex<HashMap<String, Tracked>>,
    gate: RwLock<()>,
    crashed: AtomicBool,
}

fn crashed_err() -> io::Error {
    io::Error::new(io::ErrorKind::Other, "power lost")
}

impl Vfs {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Arc<Self>> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Arc::new(Vfs {
            root,
            real_sync: AtomicBool::new(true),
            next_handle: AtomicU64::new(1),
            tracked: Mutex::new(HashMap::new()),
            gate: RwLock::new(()),
            crashed: AtomicBool::new(false),
        }))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Whether `sync` issues a real fsync. The simulated-latency backend
    /// turns this off and only models durability.
    pub fn set_real_sync(&self, on: bool) {
        self.real_sync.store(on, Ordering::Release);
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    pub fn list(&self) -> io::Result<Vec<String>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if let Some(name) = entry.file_name().to_str() {
                out.push(name.to_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    fn wrap(&self, name: &str, file: File) -> Arc<VfsFile> {
        Arc::new(VfsFile {
            handle: self.next_handle.fetch_add(1, Ordering::Relaxed),
            name: name.to_owned(),
            path: self.path(name),
            file,
            closed: AtomicBool::new(false),
        })
    }

    /// Creates (or truncates) a file. Until its first sync completes the
    /// file does not survive a power loss.
    pub fn create(&self, name: &str) -> io::Result<Arc<VfsFile>> {
        let _g = self.gate.read();
        if self.crashed.load(Ordering::Acquire) {
            return Err(crashed_err());
        }
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(self.path(name))?;
        self.tracked.lock().insert(name.to_owned(), Tracked::default());
        Ok(self.wrap(name, file))
    }

    /// Opens an existing file for appending; its current contents count as
    /// durable.
    pub fn open_existing(&self, name: &str) -> io::Result<Arc<VfsFile>> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(self.path(name))?;
        let len = file.metadata()?.len();
        self.tracked.lock().insert(
            name.to_owned(),
            Tracked {
                len,
                durable_len: len,
                synced: true,
            },
        );
        Ok(self.wrap(name, file))
    }

    pub fn len(&self, f: &VfsFile) -> u64 {
        self.tracked
            .lock()
            .get(&f.name)
            .map(|t| t.len)
            .unwrap_or_else(|| f.file.metadata().map(|m| m.len()).unwrap_or(0))
    }

    pub fn write_at(&self, f: &VfsFile, offset: u64, data: &[u8]) -> io::Result<()> {
        let _g = self.gate.read();
        if self.crashed.load(Ordering::Acquire) {
            return Err(crashed_err());
        }
        if f.is_closed() {
            return Err(io::Error::new(io::ErrorKind::Other, "write to closed file"));
        }
        f.file.write_all_at(data, offset)?;
        let end = offset + data.len() as u64;
        let mut tracked = self.tracked.lock();
        let t = tracked.entry(f.name.clone()).or_default();
        t.len = t.len.max(end);
        Ok(())
    }

    /// Appends at the tracked end of file and returns the write offset.
    pub fn append(&self, f: &VfsFile, data: &[u8]) -> io::Result<u64> {
        let offset = self.len(f);
        self.write_at(f, offset, data)?;
        Ok(offset)
    }

    /// Length an fsync issued now would make durable.
    pub fn sync_snapshot(&self, f: &VfsFile) -> u64 {
        self.len(f)
    }

    /// Issues the real fsync if enabled. Durability is recorded separately
    /// by [`Vfs::mark_synced`] once the completion is delivered.
    pub fn sync_data(&self, f: &VfsFile) -> io::Result<()> {
        let _g = self.gate.read();
        if self.crashed.load(Ordering::Acquire) {
            return Err(crashed_err());
        }
        if self.real_sync.load(Ordering::Acquire) {
            f.file.sync_data()?;
        }
        Ok(())
    }

    pub fn mark_synced(&self, f: &VfsFile, len: u64) {
        if self.crashed.load(Ordering::Acquire) {
            return;
        }
        let mut tracked = self.tracked.lock();
        if let Some(t) = tracked.get_mut(&f.name) {
            t.durable_len = t.durable_len.max(len);
            t.synced = true;
        }
    }

    /// Blocking fsync: snapshot, sync, record.
    pub fn sync(&self, f: &VfsFile) -> io::Result<()> {
        let snap = self.sync_snapshot(f);
        self.sync_data(f)?;
        self.mark_synced(f, snap);
        Ok(())
    }

    pub fn truncate(&self, f: &VfsFile, len: u64) -> io::Result<()> {
        let _g = self.gate.read();
        if self.crashed.load(Ordering::Acquire) {
            return Err(crashed_err());
        }
        f.file.set_len(len)?;
        if self.real_sync.load(Ordering::Acquire) {
            f.file.sync_all()?;
        }
        let mut tracked = self.tracked.lock();
        let t = tracked.entry(f.name.clone()).or_default();
        t.len = len;
        t.durable_len = len;
        t.synced = true;
        Ok(())
    }

    pub fn delete(&self, name: &str) -> io::Result<()> {
        let _g = self.gate.read();
        if self.crashed.load(Ordering::Acquire) {
            return Err(crashed_err());
        }
        self.tracked.lock().remove(name);
        match fs::remove_file(self.path(name)) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            other => other,
        }
    }

    /// Atomically replaces `to` with `from`. The rename itself is treated
    /// as durable.
    pub fn rename(&self, from: &str, to: &str) -> io::Result<()> {
        let _g = self.gate.read();
        if self.crashed.load(Ordering::Acquire) {
            return Err(crashed_err());
        }
        fs::rename(self.path(from), self.path(to))?;
        if self.real_sync.load(Ordering::Acquire) {
            File::open(&self.root)?.sync_all()?;
        }
        let mut tracked = self.tracked.lock();
        tracked.remove(to);
        if let Some(t) = tracked.remove(from) {
            tracked.insert(to.to_owned(), t);
        }
        Ok(())
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed.load(Ordering::Acquire)
    }

    /// Discards every unsynced byte. All later mutations fail.
    pub fn power_loss(&self) {
        let _g = self.gate.write();
        if self.crashed.swap(true, Ordering::AcqRel) {
            return;
        }
        let tracked = std::mem::take(&mut *self.tracked.lock());
        for (name, t) in tracked {
            let path = self.path(&name);
            if !t.synced {
                let _ = fs::remove_file(&path);
            } else if t.len > t.durable_len {
                if let Ok(f) = OpenOptions::new().write(true).open(&path) {
                    let _ = f.set_len(t.durable_len);
                }
            }
        }
    }
}
