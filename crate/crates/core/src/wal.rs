//! Write-ahead log for the memtable.
//!
//! Record framing: `[payload_len u32][crc32(payload) u32][payload]` with
//! payload `[seq u64][kind u8][key_len u32][key][value_len u32][value]`.
//! Replay stops at the first record that is truncated or fails its
//! checksum; everything after it is treated as a torn tail.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fault::FaultInjector;
use crate::format::block::{read_u32, read_u64};
use crate::key::{Kind, SeqNo};
use crate::memtable::MemTable;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalRecord {
    pub seq: SeqNo,
    pub kind: Kind,
    pub user_key: Vec<u8>,
    pub value: Vec<u8>,
}

impl WalRecord {
    pub fn encode(&self, out: &mut Vec<u8>) {
        let payload_len = 8 + 1 + 4 + self.user_key.len() + 4 + self.value.len();
        let start = out.len();
        out.extend_from_slice(&(payload_len as u32).to_le_bytes());
        out.extend_from_slice(&[0u8; 4]);
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.user_key.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.user_key);
        out.extend_from_slice(&(self.value.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.value);
        let crc = crc32fast::hash(&out[start + 8..]);
        out[start + 4..start + 8].copy_from_slice(&crc.to_le_bytes());
    }

    fn decode_payload(p: &[u8]) -> Option<WalRecord> {
        let seq = read_u64(p, 0)?;
        let kind = Kind::from_u8(*p.get(8)?)?;
        let klen = read_u32(p, 9)? as usize;
        let user_key = p.get(13..13 + klen)?.to_vec();
        let vlen = read_u32(p, 13 + klen)? as usize;
        let value = p.get(17 + klen..17 + klen + vlen)?.to_vec();
        (17 + klen + vlen == p.len()).then_some(WalRecord {
            seq,
            kind,
            user_key,
            value,
        })
    }
}

pub fn wal_file_name(epoch: u64) -> String {
    format!("{epoch:06}.wal")
}

/// Parses `<epoch>.wal`.
pub fn parse_wal_name(name: &str) -> Option<u64> {
    name.strip_suffix(".wal")?.parse().ok()
}

pub struct WalWriter {
    file: File,
    path: PathBuf,
    epoch: u64,
    sync: bool,
    buf: Vec<u8>,
    bytes: u64,
    faults: Arc<FaultInjector>,
}

impl WalWriter {
    pub fn create(dir: &Path, epoch: u64, sync: bool, faults: Arc<FaultInjector>) -> Result<Self> {
        faults.tick("wal.create")?;
        let path = dir.join(wal_file_name(epoch));
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let bytes = file.metadata()?.len();
        Ok(WalWriter {
            file,
            path,
            epoch,
            sync,
            buf: Vec::with_capacity(4096),
            bytes,
            faults,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    /// Appends one record. On an injected fault a torn prefix of the record
    /// reaches the file, mimicking a crash mid-write.
    pub fn append(&mut self, rec: &WalRecord) -> Result<()> {
        self.buf.clear();
        rec.encode(&mut self.buf);
        if let Err(e) = self.faults.tick("wal.append") {
            let torn = self.buf.len() / 2;
            let _ = self.file.write_all(&self.buf[..torn]);
            return Err(e);
        }
        self.file.write_all(&self.buf)?;
        self.bytes += self.buf.len() as u64;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    pub fn sync(&mut self) -> Result<()> {
        self.file.sync_data()?;
        Ok(())
    }
}

/// Reads every valid record of a log, stopping at the first damaged one.
pub fn read_records(path: &Path) -> Result<Vec<WalRecord>> {
    let data = std::fs::read(path).map_err(|e| Error::Recovery(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut pos = 0usize;
    while pos + 8 <= data.len() {
        let len = read_u32(&data, pos).unwrap() as usize;
        let crc = read_u32(&data, pos + 4).unwrap();
        let Some(payload) = data.get(pos + 8..pos + 8 + len) else {
            break;
        };
        if crc32fast::hash(payload) != crc {
            break;
        }
        let Some(rec) = WalRecord::decode_payload(payload) else {
            break;
        };
        out.push(rec);
        pos += 8 + len;
    }
    Ok(out)
}

/// Rebuilds a memtable from a log. Returns the table and the highest
/// sequence number seen.
pub fn wal_replay(path: &Path) -> Result<(MemTable, SeqNo)> {
    let mem = MemTable::new();
    let mut max_seq = 0;
    for rec in read_records(path)? {
        max_seq = max_seq.max(rec.seq);
        mem.insert(&rec.user_key, rec.seq, rec.kind, &rec.value);
    }
    Ok((mem, max_seq))
}
