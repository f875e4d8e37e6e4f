//! The database handle.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};

use crate::cache::{BlockCache, CacheKey, CacheStats};
use crate::compaction::{flush_edit, pick_compaction, room_job, run_job, CompactionJob, Env};
use crate::error::{Error, Result};
use crate::files::{parse_table_name, Reclaimer, TableCache, TableRef};
use crate::key::{Kind, SeqNo};
use crate::manifest::{self, parse_manifest_name, Manifest, CURRENT};
use crate::memtable::MemTable;
use crate::merge::{vec_iter, ConcatIter, Entry, EntryIter, MergingIter, NewestOnly};
use crate::metrics::{add, Metrics, MetricsSnapshot};
use crate::options::{Options, Strategy};
use crate::version::{find_covering, EditOp, Version, VersionEdit};
use crate::wal::{parse_wal_name, wal_file_name, wal_replay, WalRecord, WalWriter};

/// What a reader sees: memtables plus the on-disk layout, all pinned.
#[derive(Debug)]
pub struct ReadView {
    pub mem: Arc<MemTable>,
    pub imm: Option<Arc<MemTable>>,
    pub version: Arc<Version>,
}

/// A consistent point-in-time view. Holding it keeps every file it may
/// read alive.
#[derive(Debug, Clone)]
pub struct Snapshot {
    seq: SeqNo,
    view: Arc<ReadView>,
}

impl Snapshot {
    pub fn seq(&self) -> SeqNo {
        self.seq
    }

    pub fn version(&self) -> &Arc<Version> {
        &self.view.version
    }
}

/// Cache behaviour of point reads over a recent window.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReadStats {
    pub window: Duration,
    pub gets: u64,
    pub cache: CacheStats,
}

impl ReadStats {
    pub fn hit_ratio(&self) -> Option<f64> {
        self.cache.hit_ratio()
    }
}

#[derive(Debug, Clone)]
pub struct DbStats {
    pub metrics: MetricsSnapshot,
    pub cache: CacheStats,
    pub files_deleted: u64,
    pub missing_file_errors: u64,
    pub lsm_bytes: u64,
    pub buffer_bytes: u64,
    pub memtable_bytes: u64,
    pub last_seq: SeqNo,
}

struct WriteState {
    mem: Arc<MemTable>,
    imm: Option<(Arc<MemTable>, u64)>,
    wal: WalWriter,
}

struct VersionState {
    current: Arc<Version>,
    manifest: Manifest,
}

#[derive(Default)]
struct BgState {
    pending: bool,
    shutdown: bool,
}

struct Inner {
    env: Env,
    cache: Arc<BlockCache>,
    view: RwLock<Arc<ReadView>>,
    write: Mutex<WriteState>,
    write_cv: Condvar,
    state: Mutex<VersionState>,
    last_seq: AtomicU64,
    poisoned: AtomicBool,
    bg: Mutex<BgState>,
    bg_cv: Condvar,
    checkpoints: Mutex<VecDeque<(Instant, u64, CacheStats)>>,
}

pub struct Db {
    inner: Arc<Inner>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl fmt::Debug for Db {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Db").field("dir", &self.inner.env.dir).finish()
    }
}

fn list_dir(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir)? {
        if let Some(name) = e?.file_name().to_str() {
            out.push(name.to_string());
        }
    }
    Ok(out)
}

impl Db {
    pub fn open(dir: impl AsRef<Path>, opts: Options) -> Result<Db> {
        opts.validate()?;
        let dir = dir.as_ref().to_path_buf();
        let exists = dir.join(CURRENT).exists();
        if !exists {
            if !opts.create_if_missing {
                return Err(Error::InvalidArgument(format!("no database at {}", dir.display())));
            }
            std::fs::create_dir_all(&dir)?;
        }
        match Options::load(&dir)? {
            Some(stored) if !stored.same_layout(&opts) => {
                return Err(Error::InvalidArgument(format!(
                    "database was created with strategy={} size_ratio={} levels={}; reopen with the same layout",
                    stored.strategy, stored.size_ratio, stored.levels
                )))
            }
            Some(_) => {}
            None => opts.save(&dir)?,
        }

        let cache = Arc::new(BlockCache::new(opts.cache_capacity as usize));
        let tables = Arc::new(TableCache::new(&dir));
        // stays disarmed until the handle is complete, so a failed open
        // never deletes anything
        let reclaimer = Arc::new(Reclaimer::new(&dir, Arc::clone(&cache), Arc::clone(&tables)));
        reclaimer.disarm();
        let (version, manifest_no) = if exists {
            manifest::recover(&dir, opts.levels, &reclaimer)?
        } else {
            (Version::empty(opts.levels), 0)
        };
        let live = version.live_files();
        let names = list_dir(&dir)?;
        let mut max_file = 0;
        for no in names.iter().filter_map(|n| parse_table_name(n)) {
            max_file = max_file.max(no);
            if !live.contains_key(&no) {
                std::fs::remove_file(dir.join(crate::files::table_file_name(no)))?;
            }
        }
        for no in live.keys() {
            if !dir.join(crate::files::table_file_name(*no)).exists() {
                return Err(Error::Recovery(format!("table {no} is referenced but missing")));
            }
        }
        let faults = Arc::clone(&opts.faults);
        let manifest = Manifest::create(&dir, manifest_no + 1, &version, true, Arc::clone(&faults))?;
        for n in &names {
            if parse_manifest_name(n).is_some_and(|m| m <= manifest_no) {
                let _ = std::fs::remove_file(dir.join(n));
            }
        }

        // logs at or above the log number hold unflushed writes
        let mut epochs: Vec<u64> = names.iter().filter_map(|n| parse_wal_name(n)).collect();
        epochs.sort_unstable();
        let recovered = MemTable::new();
        let mut last_seq = version.last_seq;
        for &e in epochs.iter().filter(|&&e| e >= version.log_number) {
            let (m, max) = wal_replay(&dir.join(wal_file_name(e)))?;
            for (k, v) in m.range(None, None) {
                recovered.insert(&k.user_key, k.seq, k.kind, &v);
            }
            last_seq = last_seq.max(max);
        }
        for &e in epochs.iter().filter(|&&e| e < version.log_number) {
            let _ = std::fs::remove_file(dir.join(wal_file_name(e)));
        }
        let last_epoch = epochs.last().copied().unwrap_or(0).max(version.log_number);
        let epoch = last_epoch + 1;
        let wal = WalWriter::create(&dir, epoch, opts.sync_wal, Arc::clone(&faults))?;

        let metrics = Arc::new(Metrics::new(opts.levels));
        let next_file = version.next_file_no.max(max_file + 1);
        let mem = Arc::new(MemTable::new());
        let imm = (!recovered.is_empty()).then(|| (Arc::new(recovered), last_epoch));
        let view = ReadView {
            mem: Arc::clone(&mem),
            imm: imm.as_ref().map(|(m, _)| Arc::clone(m)),
            version: Arc::new(version.clone()),
        };
        let background = opts.background;
        let inner = Arc::new(Inner {
            env: Env {
                dir: dir.clone(),
                opts,
                tables,
                reclaimer,
                metrics,
                faults,
                next_file: AtomicU64::new(next_file),
            },
            cache,
            view: RwLock::new(Arc::new(view)),
            write: Mutex::new(WriteState { mem, imm, wal }),
            write_cv: Condvar::new(),
            state: Mutex::new(VersionState {
                current: Arc::new(version),
                manifest,
            }),
            last_seq: AtomicU64::new(last_seq),
            poisoned: AtomicBool::new(false),
            bg: Mutex::new(BgState::default()),
            bg_cv: Condvar::new(),
            checkpoints: Mutex::new(VecDeque::new()),
        });
        let db = Db {
            inner,
            worker: Mutex::new(None),
        };
        db.inner.env.reclaimer.arm();
        db.inner.flush_imm()?;
        db.inner.maintain()?;
        if background {
            let inner = Arc::clone(&db.inner);
            *db.worker.lock() = Some(std::thread::spawn(move || inner.worker_loop()));
        }
        Ok(db)
    }

    pub fn dir(&self) -> &Path {
        &self.inner.env.dir
    }

    pub fn options(&self) -> &Options {
        &self.inner.env.opts
    }

    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<()> {
        self.inner.write(key, Kind::Put, value)
    }

    pub fn delete(&self, key: &[u8]) -> Result<()> {
        self.inner.write(key, Kind::Tombstone, &[])
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        let seq = self.inner.last_seq.load(Ordering::SeqCst);
        let view = Arc::clone(&self.inner.view.read());
        self.inner.get(&view, key, seq)
    }

    pub fn get_at(&self, snap: &Snapshot, key: &[u8]) -> Result<Option<Vec<u8>>> {
        self.inner.get(&snap.view, key, snap.seq)
    }

    pub fn snapshot(&self) -> Snapshot {
        let seq = self.inner.last_seq.load(Ordering::SeqCst);
        let view = Arc::clone(&self.inner.view.read());
        Snapshot { seq, view }
    }

    /// Live keys in `[lo, hi)`, in order. Open bounds are `None`.
    pub fn scan(&self, lo: Option<&[u8]>, hi: Option<&[u8]>) -> Result<DbIter> {
        self.scan_at(&self.snapshot(), lo, hi)
    }

    pub fn scan_at(&self, snap: &Snapshot, lo: Option<&[u8]>, hi: Option<&[u8]>) -> Result<DbIter> {
        Ok(self.inner.scan(Arc::clone(&snap.view), snap.seq, lo, hi))
    }

    /// Flushes the memtable and settles any compaction it triggers.
    pub fn flush(&self) -> Result<()> {
        self.inner.rotate_if_nonempty()?;
        self.inner.flush_imm()?;
        self.inner.maintain()
    }

    /// Runs compactions until every level is within capacity.
    pub fn compact(&self) -> Result<()> {
        self.flush()
    }

    /// One step of an aggressive drain of levels 1..k-1 into level k.
    /// Returns `false` once there is nothing left to do.
    pub fn aggressive_step(&self) -> Result<bool> {
        self.inner.aggressive_step()
    }

    /// Flushes, then drains levels 1..k-1 (and the buffer) into level k.
    pub fn compact_aggressive(&self) -> Result<()> {
        self.inner.rotate_if_nonempty()?;
        self.inner.flush_imm()?;
        while self.inner.aggressive_step()? {}
        Ok(())
    }

    /// The next maintenance job the engine would run, if any.
    pub fn pending_compaction(&self) -> Option<CompactionJob> {
        let st = self.inner.state.lock();
        pick_compaction(&st.current, &self.inner.env.opts, false)
    }

    pub fn version(&self) -> Arc<Version> {
        Arc::clone(&self.inner.view.read().version)
    }

    pub fn last_seq(&self) -> SeqNo {
        self.inner.last_seq.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &Arc<BlockCache> {
        &self.inner.cache
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        self.inner.env.metrics.snapshot()
    }

    pub fn is_poisoned(&self) -> bool {
        self.inner.poisoned.load(Ordering::SeqCst)
    }

    pub fn stats(&self) -> DbStats {
        let view = Arc::clone(&self.inner.view.read());
        DbStats {
            metrics: self.metrics(),
            cache: self.inner.cache.stats(),
            files_deleted: self.inner.env.reclaimer.files_deleted(),
            missing_file_errors: self.inner.env.tables.missing_file_errors(),
            lsm_bytes: view.version.lsm_bytes(),
            buffer_bytes: view.version.buffer_bytes(),
            memtable_bytes: (view.mem.size_bytes() + view.imm.as_ref().map_or(0, |m| m.size_bytes())) as u64,
            last_seq: self.last_seq(),
        }
    }

    /// Cache counters over roughly the last `window`. Counters are
    /// sampled, never reset.
    pub fn read_stats_window(&self, window: Duration) -> ReadStats {
        self.inner.read_stats_window(window)
    }

    /// Table files the current version references.
    pub fn live_files(&self) -> HashSet<u64> {
        self.version().live_files().into_keys().collect()
    }

    pub fn inspect(&self) -> Inspection {
        let view = Arc::clone(&self.inner.view.read());
        Inspection::of(
            &view.version,
            self.inner.env.opts.strategy,
            view.mem.size_bytes() as u64,
            self.last_seq(),
        )
    }

    /// Drops the handle as a crash would: nothing is flushed or cleaned up.
    pub fn crash(self) {
        self.inner.env.reclaimer.disarm();
        drop(self);
    }

    /// Waits until the background worker has nothing pending.
    pub fn wait_idle(&self) {
        let mut bg = self.inner.bg.lock();
        while bg.pending && !bg.shutdown {
            self.inner.bg_cv.wait_for(&mut bg, Duration::from_millis(10));
        }
    }
}

impl Drop for Db {
    fn drop(&mut self) {
        {
            let mut bg = self.inner.bg.lock();
            bg.shutdown = true;
            self.inner.bg_cv.notify_all();
        }
        if let Some(h) = self.worker.lock().take() {
            let _ = h.join();
        }
        let _ = self.inner.write.lock().wal.sync();
        // live files must survive the in-memory teardown
        self.inner.env.reclaimer.disarm();
    }
}

impl Inner {
    fn check(&self) -> Result<()> {
        if self.poisoned.load(Ordering::SeqCst) {
            return Err(Error::Poisoned);
        }
        Ok(())
    }

    fn poison<T>(&self, r: Result<T>) -> Result<T> {
        if let Err(e) = &r {
            log::error!("background failure, refusing further writes: {e}");
            self.poisoned.store(true, Ordering::SeqCst);
        }
        r
    }

    fn write(&self, key: &[u8], kind: Kind, value: &[u8]) -> Result<()> {
        self.check()?;
        let cap = self.env.opts.level0_capacity as usize;
        let mut w = self.write.lock();
        if w.mem.size_bytes() >= cap {
            add(&self.env.metrics.c.write_stalls, 1);
            while w.imm.is_some() && w.mem.size_bytes() >= cap {
                self.check()?;
                self.write_cv.wait_for(&mut w, Duration::from_millis(50));
            }
        }
        self.check()?;
        let seq = self.last_seq.load(Ordering::SeqCst) + 1;
        let rec = WalRecord {
            seq,
            kind,
            user_key: key.to_vec(),
            value: value.to_vec(),
        };
        if let Err(e) = w.wal.append(&rec) {
            if matches!(e, Error::InjectedFault(_)) {
                self.poisoned.store(true, Ordering::SeqCst);
            }
            return Err(e);
        }
        w.mem.insert(key, seq, kind, value);
        self.last_seq.store(seq, Ordering::SeqCst);
        add(&self.env.metrics.c.writes, 1);
        let full = w.mem.size_bytes() >= cap && w.imm.is_none();
        if full {
            let r = self.rotate(&mut w);
            self.poison(r)?;
        }
        drop(w);
        if full {
            if self.env.opts.background {
                let mut bg = self.bg.lock();
                bg.pending = true;
                self.bg_cv.notify_all();
            } else {
                self.flush_imm()?;
                self.maintain()?;
            }
        }
        Ok(())
    }

    /// Freezes the memtable behind a fresh log.
    fn rotate(&self, w: &mut WriteState) -> Result<()> {
        debug_assert!(w.imm.is_none());
        let old_epoch = w.wal.epoch();
        let wal = WalWriter::create(&self.env.dir, old_epoch + 1, self.env.opts.sync_wal, Arc::clone(&self.env.faults))?;
        let _ = w.wal.sync();
        w.wal = wal;
        let frozen = std::mem::replace(&mut w.mem, Arc::new(MemTable::new()));
        w.imm = Some((Arc::clone(&frozen), old_epoch));
        let mut view = self.view.write();
        *view = Arc::new(ReadView {
            mem: Arc::clone(&w.mem),
            imm: Some(frozen),
            version: Arc::clone(&view.version),
        });
        Ok(())
    }

    fn rotate_if_nonempty(&self) -> Result<()> {
        self.check()?;
        let mut w = self.write.lock();
        while w.imm.is_some() {
            drop(w);
            self.flush_imm()?;
            w = self.write.lock();
        }
        if !w.mem.is_empty() {
            let r = self.rotate(&mut w);
            self.poison(r)?;
        }
        Ok(())
    }

    /// Applies an edit: manifest first, then publication to readers.
    fn apply(&self, st: &mut VersionState, mut edit: VersionEdit, clear_imm: bool) -> Result<()> {
        edit.push(EditOp::SetNextFile(self.env.next_file.load(Ordering::SeqCst)));
        let next = st.current.apply(&edit);
        if cfg!(debug_assertions) {
            if let Err(e) = next.check(&self.env.opts) {
                panic!("version {} breaks a layout invariant: {e}", next.id);
            }
        }
        let r = st.manifest.append(&edit);
        self.poison(r)?;
        st.current = Arc::new(next);
        let mut w = clear_imm.then(|| self.write.lock());
        {
            let mut view = self.view.write();
            *view = Arc::new(ReadView {
                mem: Arc::clone(&view.mem),
                imm: if clear_imm { None } else { view.imm.clone() },
                version: Arc::clone(&st.current),
            });
        }
        if let Some(w) = w.as_mut() {
            w.imm = None;
            self.write_cv.notify_all();
        }
        drop(w);
        if st.manifest.bytes() > self.env.opts.manifest_rewrite_bytes {
            let old = st.manifest.number();
            let r = Manifest::create(&self.env.dir, old + 1, &st.current, true, Arc::clone(&self.env.faults));
            st.manifest = self.poison(r)?;
            let _ = std::fs::remove_file(self.env.dir.join(manifest::manifest_name(old)));
        }
        Ok(())
    }

    fn run(&self, st: &mut VersionState, job: CompactionJob, defer_buffer: bool) -> Result<()> {
        let r = run_job(&self.env, &st.current, job, defer_buffer);
        let edit = self.poison(r)?;
        self.apply(st, edit, false)
    }

    /// Persists the frozen memtable, if there is one.
    fn flush_imm(&self) -> Result<()> {
        self.check()?;
        let mut st = self.state.lock();
        let Some((imm, epoch)) = self.write.lock().imm.clone() else {
            return Ok(());
        };
        let incoming = imm.size_bytes() as u64;
        // tables carry filters, indexes and block padding on top of the
        // raw entries
        let estimate = incoming + incoming / 8 + 2 * self.env.opts.block_size as u64;
        while let Some(job) = room_job(&st.current, &self.env.opts, 1, estimate) {
            self.run(&mut st, job, false)?;
        }
        let entries = imm.newest_entries();
        let max_seq = entries.iter().map(|(k, _)| k.seq).max().unwrap_or(0);
        let r = flush_edit(&self.env, &st.current, entries);
        let mut edit = self.poison(r)?;
        edit.push(EditOp::SetLogNumber(epoch + 1));
        edit.push(EditOp::SetLastSeq(max_seq));
        self.apply(&mut st, edit, true)?;
        add(&self.env.metrics.c.flushes, 1);
        add(&self.env.metrics.c.flush_bytes, incoming);
        if let Ok(names) = list_dir(&self.env.dir) {
            for e in names.iter().filter_map(|n| parse_wal_name(n)).filter(|&e| e <= epoch) {
                let _ = std::fs::remove_file(self.env.dir.join(wal_file_name(e)));
            }
        }
        Ok(())
    }

    fn maintain(&self) -> Result<()> {
        self.check()?;
        let mut st = self.state.lock();
        while let Some(job) = pick_compaction(&st.current, &self.env.opts, false) {
            self.run(&mut st, job, false)?;
        }
        if self.env.opts.aggressive {
            // a pending flush goes first
            while self.write.lock().imm.is_none() {
                match pick_compaction(&st.current, &self.env.opts, true) {
                    Some(job) => self.run(&mut st, job, true)?,
                    None => break,
                }
            }
        }
        Ok(())
    }

    fn aggressive_step(&self) -> Result<bool> {
        self.check()?;
        let mut st = self.state.lock();
        match pick_compaction(&st.current, &self.env.opts, true) {
            Some(job) => {
                self.run(&mut st, job, true)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn worker_loop(&self) {
        loop {
            {
                let mut bg = self.bg.lock();
                while !bg.pending && !bg.shutdown {
                    self.bg_cv.wait(&mut bg);
                }
                if bg.shutdown {
                    return;
                }
            }
            let r = self.flush_imm().and_then(|_| self.maintain());
            let mut bg = self.bg.lock();
            if r.is_err() || self.write.lock().imm.is_none() {
                bg.pending = false;
            }
            self.bg_cv.notify_all();
            if r.is_err() {
                // writers blocked on a flush that will never come
                self.write_cv.notify_all();
            }
        }
    }

    fn probe(&self, t: &TableRef, key: &[u8], seq: SeqNo) -> Result<Option<Entry>> {
        let m = &self.env.metrics.c;
        add(&m.get_candidates, 1);
        let table = self.env.tables.get(t.file_no)?;
        if !table.may_contain(key) {
            return Ok(None);
        }
        add(&m.get_bloom_passes, 1);
        table.get_with(key, seq, |tb, i| {
            add(&m.get_block_fetches, 1);
            let key = CacheKey {
                file_no: t.file_no,
                block_offset: tb.index()[i].handle.offset,
            };
            self.cache.get_or_load(key, || tb.read_block(i))
        })
    }

    fn get(&self, view: &ReadView, key: &[u8], seq: SeqNo) -> Result<Option<Vec<u8>>> {
        add(&self.env.metrics.c.gets, 1);
        self.maybe_checkpoint();
        let found = match view.mem.get(key, seq) {
            Some(e) => Some(e),
            None => match view.imm.as_ref().and_then(|m| m.get(key, seq)) {
                Some(e) => Some(e),
                None => {
                    let v = &view.version;
                    let mut found = None;
                    let candidates = if self.env.opts.strategy == Strategy::Dlsm {
                        buffer_candidates(v, key)
                    } else {
                        lsm_candidates(v, key)
                    };
                    for t in candidates {
                        if let Some(e) = self.probe(&t, key, seq)? {
                            found = Some(e);
                            break;
                        }
                    }
                    if self.env.opts.verify_buffer_reads && self.env.opts.strategy == Strategy::Dlsm {
                        self.verify(v, key, seq, &found)?;
                    }
                    found
                }
            },
        };
        Ok(found.and_then(|(k, v)| (k.kind == Kind::Put).then_some(v)))
    }

    /// Repeats a lookup through the LSM levels, uncached, and counts any
    /// disagreement with the buffered answer.
    fn verify(&self, v: &Version, key: &[u8], seq: SeqNo, got: &Option<Entry>) -> Result<()> {
        let mut want = None;
        for t in lsm_candidates(v, key) {
            let table = self.env.tables.get(t.file_no)?;
            if let Some(e) = table.point_get(key, seq)? {
                want = Some(e);
                break;
            }
        }
        let norm = |e: &Option<Entry>| e.as_ref().and_then(|(k, v)| (k.kind == Kind::Put).then(|| v.clone()));
        if norm(&want) != norm(got) {
            add(&self.env.metrics.c.buffer_verify_mismatches, 1);
            log::error!("buffered read of {:?} disagrees with the LSM path", String::from_utf8_lossy(key));
        }
        Ok(())
    }

    fn scan(&self, view: Arc<ReadView>, seq: SeqNo, lo: Option<&[u8]>, hi: Option<&[u8]>) -> DbIter {
        let mut sources: Vec<EntryIter> = vec![vec_iter(view.mem.range(lo, hi))];
        if let Some(imm) = &view.imm {
            sources.push(vec_iter(imm.range(lo, hi)));
        }
        let mut tables = 0u64;
        let mut run = |ts: &[TableRef]| {
            let picked: Vec<TableRef> = ts.iter().filter(|t| t.overlaps_range(lo, hi)).cloned().collect();
            tables += picked.len() as u64;
            sources.push(Box::new(ConcatIter::new(picked, Arc::clone(&self.env.tables), lo, hi)));
        };
        for l in &view.version.levels {
            run(&l.ins);
            run(&l.del);
            for r in l.runs.iter().rev() {
                run(r);
            }
        }
        add(&self.env.metrics.c.scans, 1);
        add(&self.env.metrics.c.scan_tables, tables);
        DbIter {
            inner: NewestOnly::new(MergingIter::new(sources), seq, true),
            _view: view,
        }
    }

    fn maybe_checkpoint(&self) {
        let now = Instant::now();
        let mut cp = self.checkpoints.lock();
        if cp.back().is_some_and(|(t, _, _)| now.duration_since(*t) < Duration::from_millis(100)) {
            return;
        }
        cp.push_back((now, self.env.metrics.c.gets.load(Ordering::Relaxed), self.cache.stats()));
        while cp.len() > 36_000 {
            cp.pop_front();
        }
    }

    fn read_stats_window(&self, window: Duration) -> ReadStats {
        self.maybe_checkpoint();
        let now = Instant::now();
        let gets = self.env.metrics.c.gets.load(Ordering::Relaxed);
        let stats = self.cache.stats();
        let cp = self.checkpoints.lock();
        let base = cp
            .iter()
            .find(|(t, _, _)| now.duration_since(*t) <= window)
            .or(cp.back())
            .copied();
        match base {
            Some((t, g, c)) => ReadStats {
                window: now.duration_since(t),
                gets: gets - g,
                cache: stats.since(&c),
            },
            None => ReadStats::default(),
        }
    }
}

/// Tables a buffered point read consults, most recent first: every buffer
/// level's segments (newest first), then the last level.
pub fn buffer_candidates(v: &Version, key: &[u8]) -> Vec<TableRef> {
    let mut out = Vec::new();
    for b in &v.buffer {
        for seg in b.app_segments.iter().rev().chain(b.del_segments.iter().rev()) {
            if let Some(t) = seg.candidate(key) {
                out.push(t.clone());
            }
        }
    }
    if let Some(t) = find_covering(&v.last_level().ins, key) {
        out.push(t.clone());
    }
    out
}

/// Tables a point read consults through the LSM levels, most recent first.
pub fn lsm_candidates(v: &Version, key: &[u8]) -> Vec<TableRef> {
    let mut out = Vec::new();
    for l in &v.levels {
        out.extend(find_covering(&l.ins, key).cloned());
        out.extend(find_covering(&l.del, key).cloned());
        for r in l.runs.iter().rev() {
            out.extend(find_covering(r, key).cloned());
        }
    }
    out
}

/// Sorted iterator over live key/value pairs.
pub struct DbIter {
    inner: NewestOnly<MergingIter>,
    _view: Arc<ReadView>,
}

impl Iterator for DbIter {
    type Item = Result<(Vec<u8>, Vec<u8>)>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.inner.next()?.map(|(k, v)| (k.user_key, v)))
    }
}

/// A summary of the layout, for humans.
#[derive(Debug, Clone)]
pub struct Inspection {
    pub strategy: Strategy,
    pub memtable_bytes: u64,
    pub last_seq: SeqNo,
    pub levels: Vec<LevelSummary>,
    pub buffer: Vec<BufferSummary>,
}

#[derive(Debug, Clone)]
pub struct LevelSummary {
    pub level: u32,
    pub ins_tables: usize,
    pub ins_bytes: u64,
    pub del_tables: usize,
    pub del_bytes: u64,
    pub runs: Vec<(usize, u64)>,
    pub cursor: Option<Vec<u8>>,
    pub round: u64,
}

#[derive(Debug, Clone)]
pub struct SegmentSummary {
    pub del: bool,
    pub tables: usize,
    pub bytes: u64,
    pub source_level: u32,
    pub source_round: u64,
    pub created_at: u64,
}

#[derive(Debug, Clone)]
pub struct BufferSummary {
    pub level: u32,
    pub segments: Vec<SegmentSummary>,
    pub marker: Option<Vec<u8>>,
    pub round: u64,
}

impl Inspection {
    pub fn of(v: &Version, strategy: Strategy, memtable_bytes: u64, last_seq: SeqNo) -> Self {
        let sum = |ts: &[TableRef]| ts.iter().map(|t| t.size).sum::<u64>();
        let levels = v
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| LevelSummary {
                level: i as u32 + 1,
                ins_tables: l.ins.len(),
                ins_bytes: sum(&l.ins),
                del_tables: l.del.len(),
                del_bytes: sum(&l.del),
                runs: l.runs.iter().map(|r| (r.len(), sum(r))).collect(),
                cursor: l.cursor.clone(),
                round: l.round_id,
            })
            .collect();
        let buffer = v
            .buffer
            .iter()
            .enumerate()
            .map(|(i, b)| BufferSummary {
                level: i as u32 + 1,
                segments: b
                    .del_segments
                    .iter()
                    .map(|s| (true, s))
                    .chain(b.app_segments.iter().map(|s| (false, s)))
                    .map(|(del, s)| SegmentSummary {
                        del,
                        tables: s.tables.len(),
                        bytes: s.size(),
                        source_level: s.source_level,
                        source_round: s.source_round,
                        created_at: s.created_at,
                    })
                    .collect(),
                marker: b.marker.clone(),
                round: b.round_id,
            })
            .collect();
        Inspection {
            strategy,
            memtable_bytes,
            last_seq,
            levels,
            buffer,
        }
    }

    /// Renders the layout; with `buffer`, buffer segments are listed too.
    pub fn render(&self, buffer: bool) -> String {
        let mb = |b: u64| b as f64 / (1 << 20) as f64;
        let key = |k: &Option<Vec<u8>>| k.as_ref().map_or("-".to_string(), |k| String::from_utf8_lossy(k).into_owned());
        let mut s = format!(
            "strategy {}  last_seq {}  memtable {:.2} MB\n",
            self.strategy,
            self.last_seq,
            mb(self.memtable_bytes)
        );
        for l in &self.levels {
            s += &format!(
                "L{}  ins {} tables {:.2} MB  del {} tables {:.2} MB",
                l.level,
                l.ins_tables,
                mb(l.ins_bytes),
                l.del_tables,
                mb(l.del_bytes)
            );
            if !l.runs.is_empty() {
                s += &format!("  runs {}", l.runs.len());
                for (n, b) in &l.runs {
                    s += &format!(" [{n} tables {:.2} MB]", mb(*b));
                }
            }
            s += &format!("  cursor {}  round {}\n", key(&l.cursor), l.round);
        }
        if buffer {
            for b in &self.buffer {
                let total: u64 = b.segments.iter().map(|s| s.bytes).sum();
                s += &format!(
                    "D{}  {} segments {:.2} MB  marker {}  round {}\n",
                    b.level,
                    b.segments.len(),
                    mb(total),
                    key(&b.marker),
                    b.round
                );
                for seg in &b.segments {
                    s += &format!(
                        "    {} from L{} round {}  {} tables {:.2} MB  created {}\n",
                        if seg.del { "del" } else { "app" },
                        seg.source_level,
                        seg.source_round,
                        seg.tables,
                        mb(seg.bytes),
                        seg.created_at
                    );
                }
            }
        }
        s
    }
}

impl fmt::Display for Inspection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(true))
    }
}
