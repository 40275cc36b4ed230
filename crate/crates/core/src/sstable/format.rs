//! On-disk layout of a sorted table.
//!
//! ```text
//! [data block]* [index block] [meta block] [footer: 32 bytes]
//!
//! data block : [record]* [crc32 u32 over the records]
//! record     : [klen u32][vlen u32][seqno u64][kind u8][key][value]
//! index entry: [klen u32][last key][seqno u64][kind u8][offset u64][size u32]
//! meta block : [smallest internal key][largest internal key]
//! footer     : [index_offset u64][index_len u32][meta_len u32]
//!              [record_count u64][checksum u32][magic "AISL"]
//! ```
//!
//! `checksum` is CRC32 over the index block, the meta block and the first
//! 24 footer bytes. All integers are little-endian.

use crate::codec::{put_u32, put_u64, put_u8, Cursor};
use crate::error::{Error, Result};
use crate::types::{InternalKey, KvRecord, ValueKind};

pub const MAGIC: [u8; 4] = [0x41, 0x49, 0x53, 0x4C];
pub const FOOTER_LEN: usize = 32;
pub const BLOCK_TRAILER: usize = 4;
pub fn encode_record(buf: &mut Vec<u8>, rec: &KvRecord) {
    put_u32(buf, rec.key.user_key.len() as u32);
    put_u32(buf, rec.value.len() as u32);
    put_u64(buf, rec.key.seqno);
    put_u8(buf, rec.key.kind as u8);
    buf.extend_from_slice(&rec.key.user_key);
    buf.extend_from_slice(&rec.value);
}

pub fn decode_record(cur: &mut Cursor<'_>) -> Result<KvRecord> {
    let klen = cur.u32()? as usize;
    let vlen = cur.u32()? as usize;
    let seqno = cur.u64()?;
    let kind = ValueKind::from_u8(cur.u8()?)?;
    let user_key = cur.take(klen)?.to_vec();
    let value = cur.take(vlen)?.to_vec();
    Ok(KvRecord {
        key: InternalKey {
            user_key,
            seqno,
            kind,
        },
        value,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub last_key: InternalKey,
    pub offset: u64,
    pub size: u32,
}

impl IndexEntry {
    pub fn encoded_len(last_key: &InternalKey) -> usize {
        last_key.encoded_len() + 8 + 4
    }

    pub fn encode_into(&self, buf: &mut Vec<u8>) {
        self.last_key.encode_into(buf);
        put_u64(buf, self.offset);
        put_u32(buf, self.size);
    }

    pub fn decode_from(cur: &mut Cursor<'_>) -> Result<Self> {
        Ok(IndexEntry {
            last_key: InternalKey::decode_from(cur)?,
            offset: cur.u64()?,
            size: cur.u32()?,
        })
    }
}

pub fn meta_len(smallest: &InternalKey, largest: &InternalKey) -> usize {
    smallest.encoded_len() + largest.encoded_len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Footer {
    pub index_offset: u64,
    pub index_len: u32,
    pub meta_len: u32,
    pub record_count: u64,
    pub checksum: u32,
}

impl Footer {
    fn prefix(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24);
        put_u64(&mut buf, self.index_offset);
        put_u32(&mut buf, self.index_len);
        put_u32(&mut buf, self.meta_len);
        put_u64(&mut buf, self.record_count);
        buf
    }

    pub fn compute_checksum(&self, index: &[u8], meta: &[u8]) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(index);
        h.update(meta);
        h.update(&self.prefix());
        h.finalize()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = self.prefix();
        put_u32(&mut buf, self.checksum);
        buf.extend_from_slice(&MAGIC);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != FOOTER_LEN {
            return Err(Error::corrupt("footer has wrong length"));
        }
        if bytes[28..32] != MAGIC {
            return Err(Error::corrupt("bad footer magic"));
        }
        let mut cur = Cursor::new(bytes);
        Ok(Footer {
            index_offset: cur.u64()?,
            index_len: cur.u32()?,
            meta_len: cur.u32()?,
            record_count: cur.u64()?,
            checksum: cur.u32()?,
        })
    }
}

/// Splits a data block into records after checking its trailer.
pub fn decode_block(block: &[u8]) -> Result<Vec<KvRecord>> {
    if block.len() < BLOCK_TRAILER {
        return Err(Error::corrupt("short data block"));
    }
    let (body, trailer) = block.split_at(block.len() - BLOCK_TRAILER);
    let crc = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err(Error::corrupt("data block checksum mismatch"));
    }
    let mut cur = Cursor::new(body);
    let mut out = Vec::new();
    while !cur.is_empty() {
        out.push(decode_record(&mut cur)?);
    }
    Ok(out)
}
