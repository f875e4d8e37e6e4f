//! K-way merging over sorted entry streams.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use crate::error::Result;
use crate::files::{TableCache, TableRef};
use crate::format::TableIter;
use crate::key::{InternalKey, Kind, SeqNo};

pub type Entry = (InternalKey, Vec<u8>);
pub type EntryIter = Box<dyn Iterator<Item = Result<Entry>> + Send>;

struct Head {
    entry: Entry,
    src: usize,
}

impl PartialEq for Head {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Head {}

impl PartialOrd for Head {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Head {
    // BinaryHeap is a max-heap; invert so the smallest key (and, on ties,
    // the lowest source index) comes out first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.entry.0.cmp(&self.entry.0).then(other.src.cmp(&self.src))
    }
}

/// Merges sources in internal key order. On equal keys the source listed
/// first wins the tie.
pub struct MergingIter {
    sources: Vec<EntryIter>,
    heap: BinaryHeap<Head>,
    primed: bool,
    failed: bool,
}

impl MergingIter {
    pub fn new(sources: Vec<EntryIter>) -> Self {
        MergingIter {
            heap: BinaryHeap::with_capacity(sources.len()),
            sources,
            primed: false,
            failed: false,
        }
    }

    fn pull(&mut self, src: usize) -> Result<()> {
        if let Some(r) = self.sources[src].next() {
            self.heap.push(Head { entry: r?, src });
        }
        Ok(())
    }
}

impl Iterator for MergingIter {
    type Item = Result<Entry>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if !self.primed {
            self.primed = true;
            for i in 0..self.sources.len() {
                if let Err(e) = self.pull(i) {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
        let head = self.heap.pop()?;
        if let Err(e) = self.pull(head.src) {
            self.failed = true;
            return Some(Err(e));
        }
        Some(Ok(head.entry))
    }
}

/// Keeps the newest version of each user key at or below `snapshot`.
/// With `drop_tombstones`, keys whose newest version is a delete vanish.
pub struct NewestOnly<I> {
    inner: I,
    snapshot: SeqNo,
    drop_tombstones: bool,
    last: Option<Vec<u8>>,
}

impl<I> NewestOnly<I> {
    pub fn new(inner: I, snapshot: SeqNo, drop_tombstones: bool) -> Self {
        NewestOnly {
            inner,
            snapshot,
            drop_tombstones,
            last: None,
        }
    }
}

impl<I: Iterator<Item = Result<Entry>>> Iterator for NewestOnly<I> {
    type Item = Result<Entry>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let (k, v) = match self.inner.next()? {
                Ok(e) => e,
                Err(e) => return Some(Err(e)),
            };
            if k.seq > self.snapshot {
                continue;
            }
            if self.last.as_deref() == Some(k.user_key.as_slice()) {
                continue;
            }
            self.last = Some(k.user_key.clone());
            if self.drop_tombstones && k.kind == Kind::Tombstone {
                continue;
            }
            return Some(Ok((k, v)));
        }
    }
}

/// Iterates a sorted run of tables, opening each lazily.
pub struct ConcatIter {
    tables: Vec<TableRef>,
    cache: Arc<TableCache>,
    next_table: usize,
    cur: Option<TableIter>,
    lo: Option<Vec<u8>>,
    hi: Option<Vec<u8>>,
    /// Pins the files so they outlive the iteration.
    _pins: Vec<TableRef>,
}

impl ConcatIter {
    pub fn new(tables: Vec<TableRef>, cache: Arc<TableCache>, lo: Option<&[u8]>, hi: Option<&[u8]>) -> Self {
        ConcatIter {
            _pins: tables.clone(),
            tables,
            cache,
            next_table: 0,
            cur: None,
            lo: lo.map(<[u8]>::to_vec),
            hi: hi.map(<[u8]>::to_vec),
        }
    }
}

impl Iterator for ConcatIter {
    type Item = Result<Entry>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(it) = &mut self.cur {
                match it.next() {
                    Some(r) => return Some(r),
                    None => self.cur = None,
                }
            }
            let t = self.tables.get(self.next_table)?;
            self.next_table += 1;
            match self.cache.get(t.file_no) {
                Ok(table) => self.cur = Some(table.range_iter(self.lo.as_deref(), self.hi.as_deref())),
                Err(e) => {
                    self.next_table = self.tables.len();
                    return Some(Err(e));
                }
            }
        }
    }
}

pub fn vec_iter(entries: Vec<Entry>) -> EntryIter {
    Box::new(entries.into_iter().map(Ok))
}
