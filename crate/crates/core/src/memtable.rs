//! The in-memory write buffer.

use std::collections::BTreeMap;
use std::ops::Bound;
use std::sync::atomic::{AtomicUsize, Ordering};

use parking_lot::RwLock;

use crate::format::block::encoded_entry_len;
use crate::key::{InternalKey, Kind, SeqNo};

#[derive(Debug, Default)]
pub struct MemTable {
    map: RwLock<BTreeMap<InternalKey, Vec<u8>>>,
    size: AtomicUsize,
}

impl MemTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, user_key: &[u8], seq: SeqNo, kind: Kind, value: &[u8]) {
        let charge = encoded_entry_len(user_key.len(), value.len());
        self.map
            .write()
            .insert(InternalKey::new(user_key.to_vec(), seq, kind), value.to_vec());
        self.size.fetch_add(charge, Ordering::Relaxed);
    }

    /// Approximate encoded size of all versions held.
    pub fn size_bytes(&self) -> usize {
        self.size.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.map.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.read().is_empty()
    }

    /// Newest version of `user_key` at or below `seq`; tombstones included.
    pub fn get(&self, user_key: &[u8], seq: SeqNo) -> Option<(InternalKey, Vec<u8>)> {
        let map = self.map.read();
        let (k, v) = map.range(InternalKey::lookup(user_key, seq)..).next()?;
        (k.user_key == user_key).then(|| (k.clone(), v.clone()))
    }

    /// All versions with `lo <= user_key < hi`, in internal key order.
    pub fn range(&self, lo: Option<&[u8]>, hi: Option<&[u8]>) -> Vec<(InternalKey, Vec<u8>)> {
        let map = self.map.read();
        let start = match lo {
            Some(lo) => Bound::Included(InternalKey::lookup(lo, SeqNo::MAX)),
            None => Bound::Unbounded,
        };
        map.range((start, Bound::Unbounded))
            .take_while(|(k, _)| hi.map_or(true, |hi| k.user_key.as_slice() < hi))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Newest version of every key, in key order. This is what a flush
    /// persists; older versions stay reachable through pinned snapshots.
    pub fn newest_entries(&self) -> Vec<(InternalKey, Vec<u8>)> {
        let map = self.map.read();
        let mut out: Vec<(InternalKey, Vec<u8>)> = Vec::with_capacity(map.len());
        for (k, v) in map.iter() {
            if out.last().is_some_and(|(last, _)| last.user_key == k.user_key) {
                continue;
            }
            out.push((k.clone(), v.clone()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newest_wins_and_snapshots_see_older() {
        let m = MemTable::new();
        m.insert(b"k", 1, Kind::Put, b"v1");
        m.insert(b"k", 2, Kind::Put, b"v2");
        m.insert(b"j", 3, Kind::Tombstone, b"");
        assert_eq!(m.get(b"k", 10).unwrap().1, b"v2");
        assert_eq!(m.get(b"k", 1).unwrap().1, b"v1");
        assert!(m.get(b"k", 0).is_none());
        assert_eq!(m.get(b"j", 3).unwrap().0.kind, Kind::Tombstone);
        let newest = m.newest_entries();
        assert_eq!(newest.len(), 2);
        assert_eq!(newest[1].1, b"v2");
        assert_eq!(m.range(Some(b"k"), None).len(), 2);
        assert_eq!(m.range(None, Some(b"k")).len(), 1);
    }
}
