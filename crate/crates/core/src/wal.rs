//! Write-ahead log segments.
//!
//! One segment (`wal-<segment_id>.log`) per memtable. Record layout, all
//! integers little-endian:
//!
//! ```text
//! [len u32][crc u32][seqno u64][kind u8][klen u32][vlen u32][key][value]
//! ```
//!
//! `len` counts the bytes after the crc field; `crc` is CRC32 over those
//! bytes. Replay stops at the first short or mismatching record.

use std::fs;
use std::sync::Arc;

use crate::codec::{put_u32, put_u64, put_u8, Cursor};
use crate::crash::{self, CrashPoint};
use crate::error::{Error, Result};
use crate::io::{Vfs, VfsFile};
use crate::types::{wal_file_name, FileId, KvRecord, SeqNo, ValueKind};

const HEADER: usize = 8;
const FIXED_BODY: usize = 8 + 1 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalRecord {
    pub seqno: SeqNo,
    pub kind: ValueKind,
    pub user_key: Vec<u8>,
    pub value: Vec<u8>,
}

impl WalRecord {
    pub fn from_record(rec: &KvRecord) -> Self {
        WalRecord {
            seqno: rec.key.seqno,
            kind: rec.key.kind,
            user_key: rec.key.user_key.clone(),
            value: rec.value.clone(),
        }
    }

    pub fn into_record(self) -> KvRecord {
        match self.kind {
            ValueKind::Put => KvRecord::put(self.user_key, self.seqno, self.value),
            ValueKind::Delete => KvRecord::delete(self.user_key, self.seqno),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_fields(self.seqno, self.kind, &self.user_key, &self.value)
    }

    fn decode_body(body: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(body);
        let seqno = cur.u64()?;
        let kind = ValueKind::from_u8(cur.u8()?)?;
        let klen = cur.u32()? as usize;
        let vlen = cur.u32()? as usize;
        let user_key = cur.take(klen)?.to_vec();
        let value = cur.take(vlen)?.to_vec();
        if !cur.is_empty() {
            return Err(Error::corrupt("trailing bytes in wal record"));
        }
        Ok(WalRecord {
            seqno,
            kind,
            user_key,
            value,
        })
    }
}

fn encode_fields(seqno: SeqNo, kind: ValueKind, key: &[u8], value: &[u8]) -> Vec<u8> {
    let body_len = FIXED_BODY + key.len() + value.len();
    let mut out = Vec::with_capacity(HEADER + body_len);
    put_u32(&mut out, body_len as u32);
    put_u32(&mut out, 0);
    put_u64(&mut out, seqno);
    put_u8(&mut out, kind as u8);
    put_u32(&mut out, key.len() as u32);
    put_u32(&mut out, value.len() as u32);
    out.extend_from_slice(key);
    out.extend_from_slice(value);
    let crc = crc32fast::hash(&out[HEADER..]);
    out[4..8].copy_from_slice(&crc.to_le_bytes());
    out
}

pub struct WalWriter {
    vfs: Arc<Vfs>,
    file: Arc<VfsFile>,
    segment: FileId,
    fsync_each: bool,
    last_seqno: SeqNo,
}

impl WalWriter {
    pub fn create(vfs: Arc<Vfs>, segment: FileId, fsync_each: bool) -> Result<Self> {
        let file = vfs.create(&wal_file_name(segment))?;
        Ok(WalWriter {
            vfs,
            file,
            segment,
            fsync_each,
            last_seqno: 0,
        })
    }

    pub fn segment(&self) -> FileId {
        self.segment
    }

    pub fn append(&mut self, rec: &WalRecord) -> Result<()> {
        self.append_fields(rec.seqno, rec.kind, &rec.user_key, &rec.value).map(|_| ())
    }

    /// Appends `rec` without copying it into a [`WalRecord`]; returns the
    /// bytes written.
    pub fn append_record(&mut self, rec: &KvRecord) -> Result<usize> {
        let k = &rec.key;
        self.append_fields(k.seqno, k.kind, &k.user_key, &rec.value)
    }

    fn append_fields(&mut self, seqno: SeqNo, kind: ValueKind, key: &[u8], value: &[u8]) -> Result<usize> {
        if seqno <= self.last_seqno {
            return Err(Error::corrupt(format!(
                "wal seqno {} not above {}",
                seqno, self.last_seqno
            )));
        }
        let bytes = encode_fields(seqno, kind, key, value);
        if crash::is_armed() {
            // Leaves a torn record behind if the crash fires here.
            let half = bytes.len() / 2;
            self.vfs.append(&self.file, &bytes[..half])?;
            if self.fsync_each {
                self.vfs.sync(&self.file)?;
            }
            crash::hit(CrashPoint::WalTornAppend);
            self.vfs.append(&self.file, &bytes[half..])?;
        } else {
            crash::hit(CrashPoint::WalTornAppend);
            self.vfs.append(&self.file, &bytes)?;
        }
        if self.fsync_each {
            self.vfs.sync(&self.file)?;
        }
        self.last_seqno = seqno;
        crash::hit(CrashPoint::WalAppended);
        Ok(bytes.len())
    }

    pub fn sync(&self) -> Result<()> {
        self.vfs.sync(&self.file)?;
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct WalReplay {
    pub records: Vec<WalRecord>,
    /// Bytes after the last valid record were discarded.
    pub torn: bool,
}

/// Reads a segment up to its first invalid record.
pub fn replay(vfs: &Vfs, segment: FileId) -> Result<WalReplay> {
    let data = match fs::read(vfs.path(&wal_file_name(segment))) {
        Ok(d) => d,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(WalReplay::default()),
        Err(e) => return Err(e.into()),
    };
    Ok(replay_bytes(&data))
}

pub fn replay_bytes(data: &[u8]) -> WalReplay {
    let mut out = WalReplay::default();
    let mut pos = 0usize;
    let mut last = 0;
    while pos < data.len() {
        if data.len() - pos < HEADER {
            out.torn = true;
            break;
        }
        let len = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(data[pos + 4..pos + 8].try_into().unwrap());
        let start = pos + HEADER;
        if len < FIXED_BODY || data.len() - start < len {
            out.torn = true;
            break;
        }
        let body = &data[start..start + len];
        if crc32fast::hash(body) != crc {
            out.torn = true;
            break;
        }
        match WalRecord::decode_body(body) {
            Ok(rec) if rec.seqno > last => {
                last = rec.seqno;
                out.records.push(rec);
            }
            _ => {
                out.torn = true;
                break;
            }
        }
        pos = start + len;
    }
    out
}
