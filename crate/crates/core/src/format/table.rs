//! Immutable sorted table files.
//!
//! Layout: data blocks, a Bloom filter block over user keys, an index block
//! mapping each data block's last internal key to its handle, and a fixed
//! 64-byte footer. All integers are little-endian and all offsets are
//! absolute within the file.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fault::FaultInjector;
use crate::format::block::{self, Block, BLOCK_TRAILER};
use crate::format::bloom::{BloomBuilder, BloomFilter};
use crate::key::{compare_internal, InternalKey, Kind, SeqNo};

pub const TABLE_MAGIC: u64 = 0x644C_534D_5630_3031;
pub const FORMAT_VERSION: u32 = 1;
pub const FOOTER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockHandle {
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone)]
pub struct TableOptions {
    pub block_size: usize,
    pub bits_per_key: u32,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions {
            block_size: 4096,
            bits_per_key: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableFooter {
    pub index_handle: BlockHandle,
    pub bloom_handle: BlockHandle,
    pub format_version: u32,
    pub entries: u64,
    pub tombstones: u64,
}

impl TableFooter {
    pub fn encode(&self) -> [u8; FOOTER_LEN] {
        let mut out = [0u8; FOOTER_LEN];
        out[0..8].copy_from_slice(&self.index_handle.offset.to_le_bytes());
        out[8..16].copy_from_slice(&self.index_handle.len.to_le_bytes());
        out[16..24].copy_from_slice(&self.bloom_handle.offset.to_le_bytes());
        out[24..32].copy_from_slice(&self.bloom_handle.len.to_le_bytes());
        out[32..36].copy_from_slice(&self.format_version.to_le_bytes());
        out[36..44].copy_from_slice(&self.entries.to_le_bytes());
        out[44..52].copy_from_slice(&self.tombstones.to_le_bytes());
        out[56..64].copy_from_slice(&TABLE_MAGIC.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Option<TableFooter> {
        if buf.len() != FOOTER_LEN || block::read_u64(buf, 56)? != TABLE_MAGIC {
            return None;
        }
        Some(TableFooter {
            index_handle: BlockHandle {
                offset: block::read_u64(buf, 0)?,
                len: block::read_u64(buf, 8)?,
            },
            bloom_handle: BlockHandle {
                offset: block::read_u64(buf, 16)?,
                len: block::read_u64(buf, 24)?,
            },
            format_version: block::read_u32(buf, 32)?,
            entries: block::read_u64(buf, 36)?,
            tombstones: block::read_u64(buf, 44)?,
        })
    }
}

/// Summary of a finished table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableInfo {
    pub size: u64,
    pub smallest: InternalKey,
    pub largest: InternalKey,
    pub entries: u64,
    pub tombstones: u64,
}

pub struct TableBuilder {
    path: PathBuf,
    out: BufWriter<File>,
    opts: TableOptions,
    offset: u64,
    block: Vec<u8>,
    index: Vec<(InternalKey, BlockHandle)>,
    bloom: BloomBuilder,
    smallest: Option<InternalKey>,
    last: Option<InternalKey>,
    entries: u64,
    tombstones: u64,
    faults: Option<Arc<FaultInjector>>,
}

impl TableBuilder {
    pub fn create(path: &Path, opts: TableOptions, salt: u64, faults: Option<Arc<FaultInjector>>) -> Result<Self> {
        if let Some(f) = &faults {
            f.tick("table.create")?;
        }
        let file = File::create(path)?;
        Ok(TableBuilder {
            path: path.to_path_buf(),
            out: BufWriter::with_capacity(256 * 1024, file),
            bloom: BloomBuilder::new(opts.bits_per_key, salt),
            opts,
            offset: 0,
            block: Vec::with_capacity(8192),
            index: Vec::new(),
            smallest: None,
            last: None,
            entries: 0,
            tombstones: 0,
            faults,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> u64 {
        self.entries
    }

    /// Bytes written so far plus the pending block.
    pub fn estimated_size(&self) -> u64 {
        self.offset + self.block.len() as u64
    }

    pub fn last_key(&self) -> Option<&InternalKey> {
        self.last.as_ref()
    }

    pub fn add(&mut self, user_key: &[u8], seq: SeqNo, kind: Kind, value: &[u8]) -> Result<()> {
        if let Some(last) = &self.last {
            if compare_internal(&last.user_key, last.seq, user_key, seq) != std::cmp::Ordering::Less {
                return Err(Error::corruption(
                    &self.path,
                    format!("keys out of order: {:?} then {:?}@{}", last, String::from_utf8_lossy(user_key), seq),
                ));
            }
        }
        if self.last.as_ref().map_or(true, |l| l.user_key != user_key) {
            self.bloom.add(user_key);
        }
        let key = InternalKey::new(user_key.to_vec(), seq, kind);
        if self.smallest.is_none() {
            self.smallest = Some(key.clone());
        }
        block::put_entry(&mut self.block, user_key, seq, kind, value);
        self.entries += 1;
        if kind == Kind::Tombstone {
            self.tombstones += 1;
        }
        self.last = Some(key);
        if self.block.len() >= self.opts.block_size {
            self.flush_block()?;
        }
        Ok(())
    }

    fn write_raw(&mut self, data: &[u8]) -> Result<BlockHandle> {
        if let Some(f) = &self.faults {
            f.tick("table.write")?;
        }
        let crc = crc32fast::hash(data);
        self.out.write_all(data)?;
        self.out.write_all(&crc.to_le_bytes())?;
        let handle = BlockHandle {
            offset: self.offset,
            len: data.len() as u64,
        };
        self.offset += (data.len() + BLOCK_TRAILER) as u64;
        Ok(handle)
    }

    fn flush_block(&mut self) -> Result<()> {
        if self.block.is_empty() {
            return Ok(());
        }
        let data = std::mem::take(&mut self.block);
        let handle = self.write_raw(&data)?;
        self.block = data;
        self.block.clear();
        self.index.push((self.last.clone().unwrap(), handle));
        Ok(())
    }

    /// Writes the filter, index and footer. Fails with `EmptyTable` if no
    /// entry was added; the partial file is removed in every error case.
    pub fn finish(mut self, sync: bool) -> Result<TableInfo> {
        match self.finish_inner(sync) {
            Ok(info) => Ok(info),
            Err(e) => {
                let _ = fs::remove_file(&self.path);
                Err(e)
            }
        }
    }

    fn finish_inner(&mut self, sync: bool) -> Result<TableInfo> {
        if self.entries == 0 {
            return Err(Error::EmptyTable);
        }
        self.flush_block()?;
        let bloom = std::mem::replace(&mut self.bloom, BloomBuilder::new(1, 0)).finish();
        let mut buf = Vec::new();
        bloom.encode(&mut buf);
        let bloom_handle = self.write_raw(&buf)?;

        buf.clear();
        block::put_internal_key(&mut buf, self.smallest.as_ref().unwrap());
        buf.extend_from_slice(&(self.index.len() as u32).to_le_bytes());
        for (key, h) in &self.index {
            block::put_internal_key(&mut buf, key);
            buf.extend_from_slice(&h.offset.to_le_bytes());
            buf.extend_from_slice(&h.len.to_le_bytes());
        }
        let index_handle = self.write_raw(&buf)?;
        let footer = TableFooter {
            index_handle,
            bloom_handle,
            format_version: FORMAT_VERSION,
            entries: self.entries,
            tombstones: self.tombstones,
        };
        self.out.write_all(&footer.encode())?;
        self.offset += FOOTER_LEN as u64;
        self.out.flush()?;
        if sync {
            self.out.get_ref().sync_data()?;
        }
        Ok(TableInfo {
            size: self.offset,
            smallest: self.smallest.clone().unwrap(),
            largest: self.last.clone().unwrap(),
            entries: self.entries,
            tombstones: self.tombstones,
        })
    }

    /// Drops the builder and deletes the partial file.
    pub fn abandon(self) {
        let path = self.path.clone();
        drop(self);
        let _ = fs::remove_file(path);
    }
}

/// Builds a table from a strictly sorted entry sequence.
pub fn build_table<I>(entries: I, path: &Path, opts: &TableOptions) -> Result<TableInfo>
where
    I: IntoIterator<Item = (InternalKey, Vec<u8>)>,
{
    let mut builder = TableBuilder::create(path, opts.clone(), 0, None)?;
    for (k, v) in entries {
        if let Err(e) = builder.add(&k.user_key, k.seq, k.kind, &v) {
            builder.abandon();
            return Err(e);
        }
    }
    builder.finish(false)
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub last: InternalKey,
    pub handle: BlockHandle,
}

/// An opened table. Index and filter stay resident; data blocks are read
/// on demand.
pub struct Table {
    path: PathBuf,
    file: File,
    file_no: u64,
    size: u64,
    index: Vec<IndexEntry>,
    bloom: BloomFilter,
    smallest: InternalKey,
    footer: TableFooter,
    block_reads: AtomicU64,
}

impl std::fmt::Debug for Table {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Table")
            .field("file_no", &self.file_no)
            .field("size", &self.size)
            .field("blocks", &self.index.len())
            .finish()
    }
}

impl Table {
    pub fn open(path: &Path, file_no: u64) -> Result<Table> {
        let file = File::open(path)?;
        let size = file.metadata()?.len();
        if size < FOOTER_LEN as u64 {
            return Err(Error::corruption(path, "file shorter than footer"));
        }
        let mut fbuf = [0u8; FOOTER_LEN];
        file.read_exact_at(&mut fbuf, size - FOOTER_LEN as u64)?;
        let footer = TableFooter::decode(&fbuf).ok_or_else(|| Error::corruption(path, "bad footer magic"))?;
        if footer.format_version != FORMAT_VERSION {
            return Err(Error::corruption(path, format!("unknown format version {}", footer.format_version)));
        }
        let bloom_data = read_checked(&file, path, footer.bloom_handle)?;
        let bloom = BloomFilter::decode(&bloom_data).ok_or_else(|| Error::corruption(path, "bad filter block"))?;
        let idx = read_checked(&file, path, footer.index_handle)?;
        let (smallest, index) = decode_index(&idx).ok_or_else(|| Error::corruption(path, "bad index block"))?;
        if index.is_empty() {
            return Err(Error::corruption(path, "table without data blocks"));
        }
        Ok(Table {
            path: path.to_path_buf(),
            file,
            file_no,
            size,
            index,
            bloom,
            smallest,
            footer,
            block_reads: AtomicU64::new(0),
        })
    }

    pub fn file_no(&self) -> u64 {
        self.file_no
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn smallest(&self) -> &InternalKey {
        &self.smallest
    }

    pub fn largest(&self) -> &InternalKey {
        &self.index.last().unwrap().last
    }

    pub fn index(&self) -> &[IndexEntry] {
        &self.index
    }

    pub fn footer(&self) -> &TableFooter {
        &self.footer
    }

    pub fn bloom(&self) -> &BloomFilter {
        &self.bloom
    }

    pub fn may_contain(&self, user_key: &[u8]) -> bool {
        self.bloom.may_contain(user_key)
    }

    /// Data blocks read from disk through this handle.
    pub fn block_reads(&self) -> u64 {
        self.block_reads.load(Ordering::Relaxed)
    }

    /// Position of the only block that can hold the newest version of
    /// `user_key` at or below `seq`.
    pub fn find_block(&self, user_key: &[u8], seq: SeqNo) -> Option<usize> {
        let i = self.index.partition_point(|e| {
            compare_internal(&e.last.user_key, e.last.seq, user_key, seq) == std::cmp::Ordering::Less
        });
        (i < self.index.len()).then_some(i)
    }

    pub fn read_block(&self, i: usize) -> Result<Block> {
        let handle = self.index[i].handle;
        self.block_reads.fetch_add(1, Ordering::Relaxed);
        let data = read_checked(&self.file, &self.path, handle)?;
        Block::parse(data).ok_or_else(|| Error::corruption(&self.path, format!("malformed block at {}", handle.offset)))
    }

    /// Point lookup with a caller-supplied block loader (used to route
    /// reads through a cache).
    pub fn get_with<F>(&self, user_key: &[u8], seq: SeqNo, mut load: F) -> Result<Option<(InternalKey, Vec<u8>)>>
    where
        F: FnMut(&Table, usize) -> Result<Arc<Block>>,
    {
        let Some(i) = self.find_block(user_key, seq) else {
            return Ok(None);
        };
        let block = load(self, i)?;
        Ok(block.get(user_key, seq).map(|e| e.to_owned()))
    }

    /// Newest version of `user_key` with sequence at most `seq`, read
    /// straight from disk. Tombstones are returned as entries.
    pub fn point_get(&self, user_key: &[u8], seq: SeqNo) -> Result<Option<(InternalKey, Vec<u8>)>> {
        self.get_with(user_key, seq, |t, i| t.read_block(i).map(Arc::new))
    }

    /// Entries with `lo <= user_key < hi` in internal key order. `None`
    /// bounds are open.
    pub fn range_iter(self: &Arc<Self>, lo: Option<&[u8]>, hi: Option<&[u8]>) -> TableIter {
        let block_idx = match lo {
            Some(lo) => self.index.partition_point(|e| e.last.user_key.as_slice() < lo),
            None => 0,
        };
        TableIter {
            table: Arc::clone(self),
            block_idx,
            block: None,
            pos: 0,
            lo: lo.map(|k| k.to_vec()),
            hi: hi.map(|k| k.to_vec()),
            done: false,
        }
    }

    pub fn iter(self: &Arc<Self>) -> TableIter {
        self.range_iter(None, None)
    }
}

fn read_checked(file: &File, path: &Path, h: BlockHandle) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; h.len as usize + BLOCK_TRAILER];
    file.read_exact_at(&mut buf, h.offset)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::corruption(path, "block extends past end of file"),
            _ => Error::Io(e),
        })?;
    let stored = u32::from_le_bytes(buf[h.len as usize..].try_into().unwrap());
    buf.truncate(h.len as usize);
    if crc32fast::hash(&buf) != stored {
        return Err(Error::corruption(path, format!("checksum mismatch at offset {}", h.offset)));
    }
    Ok(buf)
}

fn decode_index(data: &[u8]) -> Option<(InternalKey, Vec<IndexEntry>)> {
    let mut pos = 0;
    let smallest = block::get_internal_key(data, &mut pos)?;
    let n = block::read_u32(data, pos)? as usize;
    pos += 4;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let last = block::get_internal_key(data, &mut pos)?;
        let offset = block::read_u64(data, pos)?;
        let len = block::read_u64(data, pos + 8)?;
        pos += 16;
        out.push(IndexEntry {
            last,
            handle: BlockHandle { offset, len },
        });
    }
    (pos == data.len()).then_some((smallest, out))
}

/// Sequential iterator over a table, reading blocks directly from disk.
pub struct TableIter {
    table: Arc<Table>,
    block_idx: usize,
    block: Option<Block>,
    pos: usize,
    lo: Option<Vec<u8>>,
    hi: Option<Vec<u8>>,
    done: bool,
}

impl TableIter {
    pub fn table(&self) -> &Arc<Table> {
        &self.table
    }
}

impl Iterator for TableIter {
    type Item = Result<(InternalKey, Vec<u8>)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.done {
                return None;
            }
            if let Some(block) = &self.block {
                if self.pos < block.len() {
                    let e = block.entry(self.pos);
                    self.pos += 1;
                    if let Some(lo) = &self.lo {
                        if e.user_key < lo.as_slice() {
                            continue;
                        }
                    }
                    if let Some(hi) = &self.hi {
                        if e.user_key >= hi.as_slice() {
                            self.done = true;
                            return None;
                        }
                    }
                    return Some(Ok(e.to_owned()));
                }
                self.block = None;
            }
            if self.block_idx >= self.table.index.len() {
                self.done = true;
                return None;
            }
            match self.table.read_block(self.block_idx) {
                Ok(b) => {
                    self.block = Some(b);
                    self.pos = 0;
                    self.block_idx += 1;
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
    }
}
