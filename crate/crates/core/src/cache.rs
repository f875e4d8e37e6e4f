//! The read cache: an LRU over immutable data blocks keyed by
//! `(file_no, block_offset)`. Files are never rewritten in place, so
//! dropping a file's blocks when the file is deleted is the only
//! invalidation the cache ever needs.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;

use crate::error::Result;
use crate::format::block::Block;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub file_no: u64,
    pub block_offset: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub insertions: u64,
    pub evictions: u64,
    /// Blocks dropped because their file was deleted.
    pub invalidations: u64,
    pub invalidated_bytes: u64,
}

impl CacheStats {
    pub fn since(&self, earlier: &CacheStats) -> CacheStats {
        CacheStats {
            hits: self.hits - earlier.hits,
            misses: self.misses - earlier.misses,
            insertions: self.insertions - earlier.insertions,
            evictions: self.evictions - earlier.evictions,
            invalidations: self.invalidations - earlier.invalidations,
            invalidated_bytes: self.invalidated_bytes - earlier.invalidated_bytes,
        }
    }

    /// `None` when there were no lookups.
    pub fn hit_ratio(&self) -> Option<f64> {
        let total = self.hits + self.misses;
        (total > 0).then(|| self.hits as f64 / total as f64)
    }
}

struct Inner {
    lru: LruCache<CacheKey, Arc<Block>>,
    by_file: HashMap<u64, HashSet<u64>>,
    used: usize,
}

impl Inner {
    fn forget(&mut self, key: &CacheKey) {
        if let Some(set) = self.by_file.get_mut(&key.file_no) {
            set.remove(&key.block_offset);
            if set.is_empty() {
                self.by_file.remove(&key.file_no);
            }
        }
    }
}

pub struct BlockCache {
    capacity: usize,
    inner: Mutex<Inner>,
    hits: AtomicU64,
    misses: AtomicU64,
    insertions: AtomicU64,
    evictions: AtomicU64,
    invalidations: AtomicU64,
    invalidated_bytes: AtomicU64,
}

impl std::fmt::Debug for BlockCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockCache")
            .field("capacity", &self.capacity)
            .field("used", &self.used_bytes())
            .finish()
    }
}

impl BlockCache {
    pub fn new(capacity_bytes: usize) -> Self {
        BlockCache {
            capacity: capacity_bytes,
            inner: Mutex::new(Inner {
                lru: LruCache::unbounded(),
                by_file: HashMap::new(),
                used: 0,
            }),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            insertions: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            invalidations: AtomicU64::new(0),
            invalidated_bytes: AtomicU64::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn used_bytes(&self) -> usize {
        self.inner.lock().used
    }

    pub fn len(&self) -> usize {
        self.inner.lock().lru.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.inner.lock().lru.contains(key)
    }

    /// Number of cached blocks belonging to `file_no`.
    pub fn blocks_of(&self, file_no: u64) -> usize {
        self.inner.lock().by_file.get(&file_no).map_or(0, |s| s.len())
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            insertions: self.insertions.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            invalidations: self.invalidations.load(Ordering::Relaxed),
            invalidated_bytes: self.invalidated_bytes.load(Ordering::Relaxed),
        }
    }

    /// Returns the cached block, or loads, caches and returns it. A failed
    /// load caches nothing.
    pub fn get_or_load<F>(&self, key: CacheKey, load: F) -> Result<Arc<Block>>
    where
        F: FnOnce() -> Result<Block>,
    {
        if let Some(b) = self.inner.lock().lru.get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(b));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let block = Arc::new(load()?);
        self.insert(key, Arc::clone(&block));
        Ok(block)
    }

    fn insert(&self, key: CacheKey, block: Arc<Block>) {
        let charge = block.charge();
        if charge > self.capacity {
            return;
        }
        let mut inner = self.inner.lock();
        if let Some(old) = inner.lru.put(key, block) {
            inner.used -= old.charge();
        } else {
            inner.by_file.entry(key.file_no).or_default().insert(key.block_offset);
        }
        inner.used += charge;
        self.insertions.fetch_add(1, Ordering::Relaxed);
        while inner.used > self.capacity {
            let Some((k, b)) = inner.lru.pop_lru() else { break };
            inner.used -= b.charge();
            inner.forget(&k);
            self.evictions.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Drops every block of `file_no`; returns how many were cached.
    pub fn invalidate_file(&self, file_no: u64) -> usize {
        let mut inner = self.inner.lock();
        let Some(offsets) = inner.by_file.remove(&file_no) else {
            return 0;
        };
        let mut bytes = 0;
        for off in &offsets {
            if let Some(b) = inner.lru.pop(&CacheKey {
                file_no,
                block_offset: *off,
            }) {
                bytes += b.charge();
            }
        }
        inner.used -= bytes;
        self.invalidations.fetch_add(offsets.len() as u64, Ordering::Relaxed);
        self.invalidated_bytes.fetch_add(bytes as u64, Ordering::Relaxed);
        offsets.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::block::put_entry;
    use crate::key::Kind;

    fn block(bytes: usize) -> Block {
        let mut buf = Vec::new();
        put_entry(&mut buf, b"k", 1, Kind::Put, &vec![0u8; bytes]);
        Block::parse(buf).unwrap()
    }

    fn key(f: u64, o: u64) -> CacheKey {
        CacheKey {
            file_no: f,
            block_offset: o,
        }
    }

    #[test]
    fn miss_then_hit() {
        let c = BlockCache::new(1 << 20);
        c.get_or_load(key(1, 0), || Ok(block(100))).unwrap();
        c.get_or_load(key(1, 0), || panic!("must hit")).unwrap();
        let s = c.stats();
        assert_eq!((s.misses, s.hits), (1, 1));
        assert_eq!(s.hit_ratio(), Some(0.5));
    }

    #[test]
    fn evicts_least_recently_used() {
        let one = block(1000).charge();
        let c = BlockCache::new(one * 3);
        for i in 0..3 {
            c.get_or_load(key(1, i), || Ok(block(1000))).unwrap();
        }
        // touch block 0 so block 1 becomes the LRU victim
        c.get_or_load(key(1, 0), || panic!()).unwrap();
        c.get_or_load(key(1, 3), || Ok(block(1000))).unwrap();
        assert!(c.contains(&key(1, 0)));
        assert!(!c.contains(&key(1, 1)));
        assert!(c.used_bytes() <= c.capacity());
        assert_eq!(c.stats().evictions, 1);
    }

    #[test]
    fn invalidate_removes_exactly_one_file() {
        let c = BlockCache::new(1 << 20);
        for f in 1..=2 {
            for o in 0..4 {
                c.get_or_load(key(f, o * 4096), || Ok(block(10))).unwrap();
            }
        }
        assert_eq!(c.invalidate_file(1), 4);
        assert_eq!(c.blocks_of(1), 0);
        assert_eq!(c.blocks_of(2), 4);
        assert_eq!(c.stats().invalidations, 4);
        assert_eq!(c.invalidate_file(1), 0);
    }

    #[test]
    fn failed_load_caches_nothing() {
        let c = BlockCache::new(1 << 20);
        let r = c.get_or_load(key(1, 0), || Err(crate::Error::EmptyTable));
        assert!(r.is_err());
        assert!(c.is_empty());
    }

    #[test]
    fn zero_capacity_never_caches() {
        let c = BlockCache::new(0);
        c.get_or_load(key(1, 0), || Ok(block(10))).unwrap();
        c.get_or_load(key(1, 0), || Ok(block(10))).unwrap();
        assert_eq!(c.stats().hits, 0);
        assert!(c.is_empty());
    }
}
