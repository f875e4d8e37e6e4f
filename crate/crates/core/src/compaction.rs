//! Choosing and executing compaction steps.
//!
//! Every step reads one [`Version`] and produces one [`VersionEdit`]; the
//! caller applies it atomically. Steps are small: a rotation, one chunk
//! moved down a level, one stepped-merge of a level's runs, or one flush.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fault::FaultInjector;
use crate::files::{table_file_name, Reclaimer, TableCache, TableFile, TableRef};
use crate::format::{TableBuilder, TableOptions};
use crate::key::MAX_SEQ;
use crate::merge::{vec_iter, ConcatIter, Entry, EntryIter, MergingIter, NewestOnly};
use crate::metrics::{add, Metrics};
use crate::options::{Options, Strategy};
use crate::version::{overlapping, total, EditOp, Part, Version, VersionEdit};

/// Shared context for writing table files.
pub(crate) struct Env {
    pub dir: PathBuf,
    pub opts: Options,
    pub tables: Arc<TableCache>,
    pub reclaimer: Arc<Reclaimer>,
    pub metrics: Arc<Metrics>,
    pub faults: Arc<FaultInjector>,
    pub next_file: AtomicU64,
}

impl Env {
    pub fn new_file_no(&self) -> u64 {
        self.next_file.fetch_add(1, Ordering::SeqCst)
    }

    /// Writes a sorted stream into tables of about `table_size` bytes each.
    pub fn write_tables<I>(&self, level: u32, entries: I) -> Result<Vec<TableRef>>
    where
        I: Iterator<Item = Result<Entry>>,
    {
        let topts = TableOptions {
            block_size: self.opts.block_size,
            bits_per_key: self.opts.bloom_bits(level),
        };
        let mut out = Vec::new();
        let mut builder: Option<(u64, TableBuilder)> = None;
        for e in entries {
            let (k, v) = match e {
                Ok(e) => e,
                Err(err) => {
                    if let Some((_, b)) = builder {
                        b.abandon();
                    }
                    return Err(err);
                }
            };
            if builder.is_none() {
                let no = self.new_file_no();
                let path = self.dir.join(table_file_name(no));
                let b = TableBuilder::create(&path, topts.clone(), no, Some(Arc::clone(&self.faults)))?;
                builder = Some((no, b));
            }
            let (_, b) = builder.as_mut().unwrap();
            if let Err(err) = b.add(&k.user_key, k.seq, k.kind, &v) {
                builder.unwrap().1.abandon();
                return Err(err);
            }
            if b.estimated_size() >= self.opts.table_size {
                let (no, b) = builder.take().unwrap();
                out.push(self.finish(no, b)?);
            }
        }
        if let Some((no, b)) = builder {
            out.push(self.finish(no, b)?);
        }
        Ok(out)
    }

    fn finish(&self, no: u64, b: TableBuilder) -> Result<TableRef> {
        let info = b.finish(false)?;
        Ok(TableFile::new(no, info, Arc::clone(&self.reclaimer)))
    }

    fn run_iter(&self, tables: Vec<TableRef>) -> EntryIter {
        Box::new(ConcatIter::new(tables, Arc::clone(&self.tables), None, None))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobKind {
    /// `ins` becomes `del` (two-phase levels).
    Rotate,
    /// One chunk of `del` merged into the next level.
    TwoPhase,
    /// One chunk of the level merged into the next level, round-robin.
    Leveled,
    /// All runs of a level merged into one run of the next level.
    SteppedMerge,
    /// Drop the whole compaction buffer once levels 1..k-1 are empty.
    ClearBuffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompactionJob {
    pub kind: JobKind,
    pub strategy: Strategy,
    pub source: u32,
    pub target: u32,
}

impl CompactionJob {
    fn new(kind: JobKind, strategy: Strategy, source: u32) -> Self {
        CompactionJob {
            kind,
            strategy,
            source,
            target: if kind == JobKind::Rotate { source } else { source + 1 },
        }
    }
}

fn leveled_chunk(v: &Version, level: u32) -> Option<TableRef> {
    let l = v.level(level);
    let start = match &l.cursor {
        Some(c) => l.ins.partition_point(|t| t.smallest_key() <= c.as_slice()),
        None => 0,
    };
    l.ins.get(start).or(l.ins.first()).cloned()
}

/// The next step that moves data out of `level`, preceded if necessary by
/// whatever makes room in the level below.
pub fn drain_job(v: &Version, opts: &Options, level: u32) -> Option<CompactionJob> {
    let k = v.num_levels();
    if level >= k {
        return None;
    }
    let l = v.level(level);
    let s = opts.strategy;
    match s {
        Strategy::Dlsm | Strategy::Lsm => {
            if let Some(chunk) = l.del.first() {
                if level + 1 < k {
                    if let Some(j) = room_job(v, opts, level + 1, chunk.size) {
                        return Some(j);
                    }
                }
                Some(CompactionJob::new(JobKind::TwoPhase, s, level))
            } else if !l.ins.is_empty() {
                Some(CompactionJob::new(JobKind::Rotate, s, level))
            } else {
                None
            }
        }
        Strategy::Leveled => {
            let chunk = leveled_chunk(v, level)?;
            if level + 1 < k {
                if let Some(j) = room_job(v, opts, level + 1, chunk.size) {
                    return Some(j);
                }
            }
            Some(CompactionJob::new(JobKind::Leveled, s, level))
        }
        Strategy::SteppedMerge => {
            if l.runs.is_empty() {
                return None;
            }
            if level + 1 < k && v.level(level + 1).runs.len() >= opts.size_ratio as usize {
                return drain_job(v, opts, level + 1);
            }
            Some(CompactionJob::new(JobKind::SteppedMerge, s, level))
        }
    }
}

/// The next step needed before `incoming` bytes can enter `level` without
/// pushing it past its hard capacity, if any.
pub fn room_job(v: &Version, opts: &Options, level: u32, incoming: u64) -> Option<CompactionJob> {
    if level >= v.num_levels() || opts.strategy == Strategy::SteppedMerge {
        return None;
    }
    if v.level(level).size() + incoming <= opts.hard_capacity(level) {
        return None;
    }
    drain_job(v, opts, level)
}

/// The next maintenance step, or `None` when the tree is in shape. In
/// aggressive mode every level above k is emptied, top down.
pub fn pick_compaction(v: &Version, opts: &Options, aggressive: bool) -> Option<CompactionJob> {
    let k = v.num_levels();
    let s = opts.strategy;
    if aggressive {
        for i in 1..k {
            if let Some(j) = drain_job(v, opts, i) {
                return Some(j);
            }
        }
        if s == Strategy::Dlsm && v.buffer.iter().any(|b| !b.is_empty()) {
            return Some(CompactionJob::new(JobKind::ClearBuffer, s, 1));
        }
        return None;
    }
    for i in 1..k {
        let l = v.level(i);
        let cap = opts.level_capacity(i);
        let due = match s {
            Strategy::Dlsm | Strategy::Lsm => {
                if l.del.is_empty() && total(&l.ins) >= cap {
                    return Some(CompactionJob::new(JobKind::Rotate, s, i));
                }
                l.size() > cap
            }
            Strategy::Leveled => l.size() > cap,
            Strategy::SteppedMerge => l.runs.len() >= opts.size_ratio as usize,
        };
        if due {
            return drain_job(v, opts, i);
        }
    }
    None
}

/// Executes one step against `v`. With `defer_buffer`, buffer tables are
/// not released as the drain passes them; they are dropped all at once by
/// a final [`JobKind::ClearBuffer`].
pub(crate) fn run_job(env: &Env, v: &Version, job: CompactionJob, defer_buffer: bool) -> Result<VersionEdit> {
    let mut edit = VersionEdit::new();
    let k = v.num_levels();
    let dlsm = env.opts.strategy == Strategy::Dlsm;
    add(&env.metrics.c.compaction_jobs, 1);
    match job.kind {
        JobKind::Rotate => {
            let s = job.source;
            edit.push(EditOp::RotateLevel { level: s });
            if dlsm {
                let b = v.buffer_level(s);
                if !defer_buffer {
                    for t in b.del_segments.iter().flat_map(|seg| seg.tables.iter()) {
                        edit.push(EditOp::BufferRemove {
                            level: s,
                            file_no: t.file_no,
                        });
                    }
                }
                edit.push(EditOp::RotateBuffer {
                    level: s,
                    keep_del: defer_buffer,
                });
            }
            add(&env.metrics.c.rotations, 1);
        }
        JobKind::TwoPhase | JobKind::Leveled => {
            let s = job.source;
            let t = job.target;
            let (chunk, part) = if job.kind == JobKind::TwoPhase {
                (v.level(s).del.first().cloned(), Part::Del)
            } else {
                (leveled_chunk(v, s), Part::Ins)
            };
            let chunk = chunk.ok_or_else(|| Error::InvalidArgument(format!("level {s} has nothing to move")))?;
            edit.push(EditOp::RemoveTable {
                level: s,
                part,
                file_no: chunk.file_no,
            });
            edit.push(EditOp::SetCursor {
                level: s,
                key: Some(chunk.largest_key().to_vec()),
            });
            merge_into(env, v, &mut edit, vec![chunk.clone()], t, Part::Ins)?;
            if dlsm && job.kind == JobKind::TwoPhase {
                if t < k {
                    edit.push(EditOp::BufferAppend {
                        level: t,
                        source_level: s,
                        source_round: v.level(s).round_id,
                        table: chunk.clone(),
                    });
                }
                if !defer_buffer {
                    advance_buffer(v, &mut edit, s, chunk.largest_key());
                }
            }
        }
        JobKind::SteppedMerge => {
            let s = job.source;
            let t = job.target;
            let runs = &v.level(s).runs;
            edit.push(EditOp::ClearRuns { level: s });
            if t < k {
                if runs.len() == 1 {
                    add(&env.metrics.c.relinked_tables, runs[0].len() as u64);
                    add(&env.metrics.c.relinked_bytes, total(&runs[0]));
                    edit.push(EditOp::PushRun {
                        level: t,
                        tables: runs[0].clone(),
                    });
                } else {
                    let read: u64 = runs.iter().map(|r| total(r)).sum();
                    let sources = runs.iter().rev().map(|r| env.run_iter(r.clone())).collect();
                    let out = env.write_tables(t, NewestOnly::new(MergingIter::new(sources), MAX_SEQ, false))?;
                    count_io(env, t, read, total(&out));
                    edit.push(EditOp::PushRun { level: t, tables: out });
                }
            } else {
                let all: Vec<TableRef> = runs.iter().rev().flatten().cloned().collect();
                merge_runs_into_last(env, v, &mut edit, runs.iter().rev().cloned().collect(), all)?;
            }
        }
        JobKind::ClearBuffer => {
            for i in 1..k {
                if !v.buffer_level(i).is_empty() {
                    edit.push(EditOp::ClearBuffer { level: i });
                }
            }
        }
    }
    Ok(edit)
}

fn count_io(env: &Env, level: u32, read: u64, written: u64) {
    add(&env.metrics.c.compaction_bytes_read, read);
    add(&env.metrics.c.compaction_bytes_written, written);
    env.metrics.level(level, |l| {
        l.jobs += 1;
        l.bytes_read += read;
        l.bytes_written += written;
    });
}

/// Merges the sorted, disjoint `incoming` tables into `level`'s run.
/// Incoming data is newer than anything in the target.
fn merge_into(
    env: &Env,
    v: &Version,
    edit: &mut VersionEdit,
    incoming: Vec<TableRef>,
    level: u32,
    part: Part,
) -> Result<()> {
    let last = level == v.num_levels();
    let lo = incoming.first().unwrap().smallest_key().to_vec();
    let hi = incoming.last().unwrap().largest_key().to_vec();
    let run = v.level(level).part(part);
    let over = overlapping(run, &lo, &hi);
    let in_bytes = total(&incoming);
    let over_bytes = total(&over);
    env.metrics.level(level, |l| {
        l.chunk_steps += 1;
        l.chunk_bytes += in_bytes;
        l.fanin_tables += over.len() as u64;
        l.overlap_bytes += over_bytes;
    });
    let has_tombstones = incoming.iter().any(|t| t.tombstones > 0);
    // tables between the incoming ones could overlap the target only if
    // incoming were not disjoint, so re-linking keeps the run sorted
    if over.is_empty() && !(last && has_tombstones) {
        add(&env.metrics.c.relinked_tables, incoming.len() as u64);
        add(&env.metrics.c.relinked_bytes, in_bytes);
        for t in incoming {
            edit.push(EditOp::AddTable { level, part, table: t });
        }
        return Ok(());
    }
    let sources = vec![env.run_iter(incoming), env.run_iter(over.clone())];
    let out = env.write_tables(level, NewestOnly::new(MergingIter::new(sources), MAX_SEQ, last))?;
    count_io(env, level, in_bytes + over_bytes, total(&out));
    for t in &over {
        edit.push(EditOp::RemoveTable {
            level,
            part,
            file_no: t.file_no,
        });
    }
    for t in out {
        edit.push(EditOp::AddTable { level, part, table: t });
    }
    Ok(())
}

/// Stepped merge into the last level: every run at once.
fn merge_runs_into_last(
    env: &Env,
    v: &Version,
    edit: &mut VersionEdit,
    runs_newest_first: Vec<Vec<TableRef>>,
    all: Vec<TableRef>,
) -> Result<()> {
    let k = v.num_levels();
    let lo = all.iter().map(|t| t.smallest_key()).min().unwrap().to_vec();
    let hi = all.iter().map(|t| t.largest_key()).max().unwrap().to_vec();
    let over = overlapping(&v.level(k).ins, &lo, &hi);
    let read = total(&all) + total(&over);
    let mut sources: Vec<EntryIter> = runs_newest_first.into_iter().map(|r| env.run_iter(r)).collect();
    sources.push(env.run_iter(over.clone()));
    let out = env.write_tables(k, NewestOnly::new(MergingIter::new(sources), MAX_SEQ, true))?;
    count_io(env, k, read, total(&out));
    for t in &over {
        edit.push(EditOp::RemoveTable {
            level: k,
            part: Part::Ins,
            file_no: t.file_no,
        });
    }
    for t in out {
        edit.push(EditOp::AddTable {
            level: k,
            part: Part::Ins,
            table: t,
        });
    }
    Ok(())
}

/// Buffer level `level` catches up with the drain cursor: the marker moves
/// to `cursor` and del-segment tables entirely at or below it are released.
fn advance_buffer(v: &Version, edit: &mut VersionEdit, level: u32, cursor: &[u8]) {
    let b = v.buffer_level(level);
    for seg in &b.del_segments {
        let floor = match &seg.floor {
            Some(f) if f.as_slice() > cursor => f.as_slice(),
            _ => cursor,
        };
        for t in seg.tables.iter().take_while(|t| t.largest_key() <= floor) {
            edit.push(EditOp::BufferRemove {
                level,
                file_no: t.file_no,
            });
        }
    }
    edit.push(EditOp::AdvanceMarker {
        level,
        key: cursor.to_vec(),
    });
}

/// Persists a frozen memtable into level 1 (and, for the buffered
/// strategy, into buffer level 1). `entries` holds the newest version of
/// each key, sorted.
pub(crate) fn flush_edit(env: &Env, v: &Version, entries: Vec<Entry>) -> Result<VersionEdit> {
    let mut edit = VersionEdit::new();
    if entries.is_empty() {
        return Ok(edit);
    }
    match env.opts.strategy {
        Strategy::SteppedMerge => {
            let run = env.write_tables(1, vec_iter(entries))?;
            add(&env.metrics.c.flush_table_bytes, total(&run));
            edit.push(EditOp::PushRun { level: 1, tables: run });
        }
        Strategy::Dlsm => {
            let dump = env.write_tables(1, vec_iter(entries))?;
            add(&env.metrics.c.buffer_dump_bytes, total(&dump));
            // each dump is its own segment; the version clock restarts on
            // recovery, so the first file number tells dumps apart
            let dump_id = dump.first().map_or(0, |t| t.file_no);
            for t in &dump {
                edit.push(EditOp::BufferAppend {
                    level: 1,
                    source_level: 0,
                    source_round: dump_id,
                    table: t.clone(),
                });
            }
            // the dump files double as the level-1 input
            let before = env.metrics.c.compaction_bytes_written.load(Ordering::Relaxed);
            merge_into(env, v, &mut edit, dump, 1, Part::Ins)?;
            let after = env.metrics.c.compaction_bytes_written.load(Ordering::Relaxed);
            add(&env.metrics.c.flush_table_bytes, after - before);
        }
        Strategy::Lsm | Strategy::Leveled => {
            let lo = entries.first().unwrap().0.user_key.clone();
            let hi = entries.last().unwrap().0.user_key.clone();
            let over = overlapping(&v.level(1).ins, &lo, &hi);
            let out = if over.is_empty() {
                env.write_tables(1, vec_iter(entries))?
            } else {
                let sources = vec![vec_iter(entries), env.run_iter(over.clone())];
                let out = env.write_tables(1, NewestOnly::new(MergingIter::new(sources), MAX_SEQ, false))?;
                count_io(env, 1, total(&over), total(&out));
                out
            };
            add(&env.metrics.c.flush_table_bytes, total(&out));
            for t in &over {
                edit.push(EditOp::RemoveTable {
                    level: 1,
                    part: Part::Ins,
                    file_no: t.file_no,
                });
            }
            for t in out {
                edit.push(EditOp::AddTable {
                    level: 1,
                    part: Part::Ins,
                    table: t,
                });
            }
        }
    }
    Ok(edit)
}
