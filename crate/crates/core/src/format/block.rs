//! Data block encoding.
//!
//! Entry layout (little-endian):
//! `[key_len u32][user_key][seq u64][kind u8][value_len u32][value]`.
//! A block on disk is its entries followed by a CRC32 of those bytes.

use std::cmp::Ordering;

use crate::key::{compare_internal, InternalKey, Kind, SeqNo};

pub const BLOCK_TRAILER: usize = 4;
pub const ENTRY_OVERHEAD: usize = 4 + 8 + 1 + 4;

pub fn encoded_entry_len(user_key_len: usize, value_len: usize) -> usize {
    ENTRY_OVERHEAD + user_key_len + value_len
}

pub fn put_entry(out: &mut Vec<u8>, user_key: &[u8], seq: SeqNo, kind: Kind, value: &[u8]) {
    out.extend_from_slice(&(user_key.len() as u32).to_le_bytes());
    out.extend_from_slice(user_key);
    out.extend_from_slice(&seq.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    out.extend_from_slice(value);
}

pub fn put_internal_key(out: &mut Vec<u8>, key: &InternalKey) {
    out.extend_from_slice(&(key.user_key.len() as u32).to_le_bytes());
    out.extend_from_slice(&key.user_key);
    out.extend_from_slice(&key.seq.to_le_bytes());
    out.push(key.kind as u8);
}

/// Reads an internal key at `*pos`, advancing it.
pub fn get_internal_key(data: &[u8], pos: &mut usize) -> Option<InternalKey> {
    let klen = read_u32(data, *pos)? as usize;
    let start = *pos + 4;
    let key = data.get(start..start + klen)?.to_vec();
    let seq = read_u64(data, start + klen)?;
    let kind = Kind::from_u8(*data.get(start + klen + 8)?)?;
    *pos = start + klen + 9;
    Some(InternalKey::new(key, seq, kind))
}

pub fn read_u32(data: &[u8], pos: usize) -> Option<u32> {
    Some(u32::from_le_bytes(data.get(pos..pos + 4)?.try_into().ok()?))
}

pub fn read_u64(data: &[u8], pos: usize) -> Option<u64> {
    Some(u64::from_le_bytes(data.get(pos..pos + 8)?.try_into().ok()?))
}

/// A borrowed view of one entry.
#[derive(Debug, Clone, Copy)]
pub struct EntryRef<'a> {
    pub user_key: &'a [u8],
    pub seq: SeqNo,
    pub kind: Kind,
    pub value: &'a [u8],
}

impl EntryRef<'_> {
    pub fn to_owned(&self) -> (InternalKey, Vec<u8>) {
        (
            InternalKey::new(self.user_key.to_vec(), self.seq, self.kind),
            self.value.to_vec(),
        )
    }
}

/// A decoded, checksum-verified data block.
#[derive(Debug)]
pub struct Block {
    data: Vec<u8>,
    offsets: Vec<u32>,
}

impl Block {
    /// Parses block contents (without trailer). Returns `None` on malformed
    /// entries.
    pub fn parse(data: Vec<u8>) -> Option<Block> {
        let mut offsets = Vec::new();
        let mut pos = 0usize;
        while pos < data.len() {
            offsets.push(pos as u32);
            let klen = read_u32(&data, pos)? as usize;
            let vpos = pos + 4 + klen + 9;
            let vlen = read_u32(&data, vpos)? as usize;
            Kind::from_u8(*data.get(pos + 4 + klen + 8)?)?;
            pos = vpos + 4 + vlen;
            if pos > data.len() {
                return None;
            }
        }
        Some(Block { data, offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Bytes held in memory, used for cache accounting.
    pub fn charge(&self) -> usize {
        self.data.len() + self.offsets.len() * 4
    }

    pub fn entry(&self, i: usize) -> EntryRef<'_> {
        let pos = self.offsets[i] as usize;
        let d = &self.data;
        let klen = u32::from_le_bytes(d[pos..pos + 4].try_into().unwrap()) as usize;
        let k0 = pos + 4;
        let seq = u64::from_le_bytes(d[k0 + klen..k0 + klen + 8].try_into().unwrap());
        let kind = Kind::from_u8(d[k0 + klen + 8]).unwrap();
        let v0 = k0 + klen + 9;
        let vlen = u32::from_le_bytes(d[v0..v0 + 4].try_into().unwrap()) as usize;
        EntryRef {
            user_key: &d[k0..k0 + klen],
            seq,
            kind,
            value: &d[v0 + 4..v0 + 4 + vlen],
        }
    }

    /// Index of the first entry at or after `(user_key, seq)` in internal
    /// key order.
    pub fn seek(&self, user_key: &[u8], seq: SeqNo) -> usize {
        let mut lo = 0usize;
        let mut hi = self.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            let e = self.entry(mid);
            if compare_internal(e.user_key, e.seq, user_key, seq) == Ordering::Less {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// First entry for `user_key` with sequence at most `seq`.
    pub fn get(&self, user_key: &[u8], seq: SeqNo) -> Option<EntryRef<'_>> {
        let i = self.seek(user_key, seq);
        if i < self.len() {
            let e = self.entry(i);
            if e.user_key == user_key {
                return Some(e);
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_seek() {
        let mut buf = Vec::new();
        put_entry(&mut buf, b"a", 3, Kind::Put, b"x");
        put_entry(&mut buf, b"b", 7, Kind::Put, b"y7");
        put_entry(&mut buf, b"b", 3, Kind::Tombstone, b"");
        put_entry(&mut buf, b"d", 1, Kind::Put, b"z");
        let block = Block::parse(buf).unwrap();
        assert_eq!(block.len(), 4);
        assert_eq!(block.get(b"b", 10).unwrap().value, b"y7");
        let old = block.get(b"b", 5).unwrap();
        assert_eq!((old.seq, old.kind), (3, Kind::Tombstone));
        assert!(block.get(b"b", 2).is_none());
        assert!(block.get(b"c", 10).is_none());
        assert_eq!(block.seek(b"e", 1), 4);
    }

    #[test]
    fn truncated_block_is_rejected() {
        let mut buf = Vec::new();
        put_entry(&mut buf, b"a", 3, Kind::Put, b"value");
        buf.truncate(buf.len() - 2);
        assert!(Block::parse(buf).is_none());
    }
}
