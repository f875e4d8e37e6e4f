//! Table file lifetime.
//!
//! Every live table is a [`TableFile`] shared by `Arc`. Versions, snapshots
//! and in-flight compactions all hold clones, so the strong count is the
//! table's reference count; when the last one drops, the file is deleted
//! and its cached blocks are invalidated.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::cache::BlockCache;
use crate::error::{Error, Result};
use crate::format::{Table, TableInfo};
use crate::key::InternalKey;

pub fn table_file_name(file_no: u64) -> String {
    format!("{file_no:06}.sst")
}

pub fn parse_table_name(name: &str) -> Option<u64> {
    name.strip_suffix(".sst")?.parse().ok()
}

/// Metadata of one immutable table plus its reclaim hook.
pub struct TableFile {
    pub file_no: u64,
    pub size: u64,
    pub smallest: InternalKey,
    pub largest: InternalKey,
    pub entries: u64,
    pub tombstones: u64,
    reclaimer: Arc<Reclaimer>,
}

pub type TableRef = Arc<TableFile>;

impl TableFile {
    pub fn new(file_no: u64, info: TableInfo, reclaimer: Arc<Reclaimer>) -> TableRef {
        Arc::new(TableFile {
            file_no,
            size: info.size,
            smallest: info.smallest,
            largest: info.largest,
            entries: info.entries,
            tombstones: info.tombstones,
            reclaimer,
        })
    }

    pub fn info(&self) -> TableInfo {
        TableInfo {
            size: self.size,
            smallest: self.smallest.clone(),
            largest: self.largest.clone(),
            entries: self.entries,
            tombstones: self.tombstones,
        }
    }

    pub fn smallest_key(&self) -> &[u8] {
        &self.smallest.user_key
    }

    pub fn largest_key(&self) -> &[u8] {
        &self.largest.user_key
    }

    pub fn covers(&self, user_key: &[u8]) -> bool {
        self.smallest_key() <= user_key && user_key <= self.largest_key()
    }

    /// Whether `[lo, hi)` intersects this table's user-key range.
    pub fn overlaps_range(&self, lo: Option<&[u8]>, hi: Option<&[u8]>) -> bool {
        lo.map_or(true, |lo| self.largest_key() >= lo) && hi.map_or(true, |hi| self.smallest_key() < hi)
    }

    /// Whether the closed user-key ranges intersect.
    pub fn overlaps(&self, other_lo: &[u8], other_hi: &[u8]) -> bool {
        self.smallest_key() <= other_hi && other_lo <= self.largest_key()
    }
}

impl std::fmt::Debug for TableFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}[{:?}..{:?}]", self.file_no, self.smallest, self.largest)
    }
}

impl Drop for TableFile {
    fn drop(&mut self) {
        self.reclaimer.release(self.file_no);
    }
}

/// Open table handles (index and filter resident), keyed by file number.
#[derive(Default)]
pub struct TableCache {
    dir: PathBuf,
    open: Mutex<HashMap<u64, Arc<Table>>>,
    missing: AtomicU64,
}

impl TableCache {
    pub fn new(dir: &Path) -> Self {
        TableCache {
            dir: dir.to_path_buf(),
            open: Mutex::new(HashMap::new()),
            missing: AtomicU64::new(0),
        }
    }

    pub fn get(&self, file_no: u64) -> Result<Arc<Table>> {
        if let Some(t) = self.open.lock().get(&file_no) {
            return Ok(Arc::clone(t));
        }
        let path = self.dir.join(table_file_name(file_no));
        let table = match Table::open(&path, file_no) {
            Ok(t) => Arc::new(t),
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                self.missing.fetch_add(1, Ordering::Relaxed);
                return Err(Error::Io(e));
            }
            Err(e) => return Err(e),
        };
        Ok(Arc::clone(self.open.lock().entry(file_no).or_insert(table)))
    }

    pub fn evict(&self, file_no: u64) {
        self.open.lock().remove(&file_no);
    }

    /// Opens that failed because the file no longer existed.
    pub fn missing_file_errors(&self) -> u64 {
        self.missing.load(Ordering::Relaxed)
    }
}

/// Deletes table files once nothing references them.
pub struct Reclaimer {
    dir: PathBuf,
    armed: AtomicBool,
    cache: Arc<BlockCache>,
    tables: Arc<TableCache>,
    deleted: AtomicU64,
    deleted_bytes: AtomicU64,
}

impl Reclaimer {
    pub fn new(dir: &Path, cache: Arc<BlockCache>, tables: Arc<TableCache>) -> Self {
        Reclaimer {
            dir: dir.to_path_buf(),
            armed: AtomicBool::new(true),
            cache,
            tables,
            deleted: AtomicU64::new(0),
            deleted_bytes: AtomicU64::new(0),
        }
    }

    /// Stop deleting files. Used on close and on simulated crashes, so that
    /// tearing down in-memory state never touches the directory.
    pub fn disarm(&self) {
        self.armed.store(false, Ordering::SeqCst);
    }

    pub fn arm(&self) {
        self.armed.store(true, Ordering::SeqCst);
    }

    pub fn files_deleted(&self) -> u64 {
        self.deleted.load(Ordering::Relaxed)
    }

    pub fn bytes_deleted(&self) -> u64 {
        self.deleted_bytes.load(Ordering::Relaxed)
    }

    fn release(&self, file_no: u64) {
        if !self.armed.load(Ordering::SeqCst) {
            return;
        }
        self.tables.evict(file_no);
        self.cache.invalidate_file(file_no);
        let path = self.dir.join(table_file_name(file_no));
        let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        match std::fs::remove_file(&path) {
            Ok(()) => {
                self.deleted.fetch_add(1, Ordering::Relaxed);
                self.deleted_bytes.fetch_add(size, Ordering::Relaxed);
            }
            Err(e) => log::warn!("failed to delete {}: {e}", path.display()),
        }
    }
}
