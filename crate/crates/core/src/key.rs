//! Internal keys: a user key tagged with a sequence number and a kind.

use std::cmp::Ordering;
use std::fmt;

/// Sequence numbers are assigned by the write path and never reused.
pub type SeqNo = u64;

/// Largest sequence number a lookup can ask for.
pub const MAX_SEQ: SeqNo = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Kind {
    Tombstone = 0,
    Put = 1,
}

impl Kind {
    pub fn from_u8(b: u8) -> Option<Kind> {
        match b {
            0 => Some(Kind::Tombstone),
            1 => Some(Kind::Put),
            _ => None,
        }
    }
}

/// Orders ascending by user key, then newest version first.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct InternalKey {
    pub user_key: Vec<u8>,
    pub seq: SeqNo,
    pub kind: Kind,
}

impl InternalKey {
    pub fn new(user_key: impl Into<Vec<u8>>, seq: SeqNo, kind: Kind) -> Self {
        InternalKey {
            user_key: user_key.into(),
            seq,
            kind,
        }
    }

    /// The smallest internal key for `user_key` visible at `seq`.
    pub fn lookup(user_key: &[u8], seq: SeqNo) -> Self {
        InternalKey::new(user_key.to_vec(), seq, Kind::Put)
    }

    /// Number of bytes this key occupies in the on-disk entry encoding
    /// (length prefix, key, sequence, kind).
    pub fn encoded_len(&self) -> usize {
        4 + self.user_key.len() + 8 + 1
    }
}

pub fn compare_internal(a_key: &[u8], a_seq: SeqNo, b_key: &[u8], b_seq: SeqNo) -> Ordering {
    a_key.cmp(b_key).then_with(|| b_seq.cmp(&a_seq))
}

impl Ord for InternalKey {
    fn cmp(&self, other: &Self) -> Ordering {
        compare_internal(&self.user_key, self.seq, &other.user_key, other.seq)
            .then_with(|| other.kind.cmp(&self.kind))
    }
}

impl PartialOrd for InternalKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for InternalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}@{}{}",
            String::from_utf8_lossy(&self.user_key),
            self.seq,
            if self.kind == Kind::Tombstone { "(del)" } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newest_version_sorts_first() {
        let a = InternalKey::new(b"k".to_vec(), 9, Kind::Put);
        let b = InternalKey::new(b"k".to_vec(), 4, Kind::Put);
        let c = InternalKey::new(b"l".to_vec(), 100, Kind::Put);
        assert!(a < b);
        assert!(b < c);
        assert!(InternalKey::lookup(b"k", 5) < b);
        assert!(InternalKey::lookup(b"k", 5) > a);
    }
}
