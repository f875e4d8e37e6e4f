//! Immutable snapshots of the on-disk layout and the edits between them.
//!
//! Level i (1 <= i < k) is split into an `ins` part receiving data from
//! above and a `del` part being drained below. Each buffer level mirrors
//! that split with segments of tables: `app` segments collect data that
//! arrived this round, `del` segments hold last round's data whose prefix
//! up to `marker` has already moved down.

use std::collections::HashMap;

use crate::files::TableRef;
use crate::options::{Options, Strategy};

/// Which part of a level a table belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Ins,
    Del,
}

#[derive(Debug, Clone, Default)]
pub struct LevelState {
    /// Sorted, non-overlapping. For leveled and stepped merge layouts,
    /// and for the last level, this is the level's only run.
    pub ins: Vec<TableRef>,
    pub del: Vec<TableRef>,
    /// Stepped merge runs, oldest first.
    pub runs: Vec<Vec<TableRef>>,
    /// Largest user key moved out of `del` this round (two-phase) or of
    /// `ins` (leveled round-robin).
    pub cursor: Option<Vec<u8>>,
    pub round_id: u64,
}

impl LevelState {
    pub fn part(&self, p: Part) -> &Vec<TableRef> {
        match p {
            Part::Ins => &self.ins,
            Part::Del => &self.del,
        }
    }

    fn part_mut(&mut self, p: Part) -> &mut Vec<TableRef> {
        match p {
            Part::Ins => &mut self.ins,
            Part::Del => &mut self.del,
        }
    }

    pub fn size(&self) -> u64 {
        total(&self.ins) + total(&self.del) + self.runs.iter().map(|r| total(r)).sum::<u64>()
    }

    pub fn table_count(&self) -> usize {
        self.ins.len() + self.del.len() + self.runs.iter().map(Vec::len).sum::<usize>()
    }

    pub fn tables(&self) -> impl Iterator<Item = &TableRef> {
        self.ins.iter().chain(self.del.iter()).chain(self.runs.iter().flatten())
    }
}

/// A group of buffer tables with a common origin.
#[derive(Debug, Clone)]
pub struct Segment {
    /// Sorted, non-overlapping.
    pub tables: Vec<TableRef>,
    /// Level the data came from; 0 for memtable dumps.
    pub source_level: u32,
    pub source_round: u64,
    /// Logical time of creation (version clock).
    pub created_at: u64,
    /// Keys at or below this are obsolete in this segment.
    pub floor: Option<Vec<u8>>,
}

impl Segment {
    pub fn size(&self) -> u64 {
        total(&self.tables)
    }

    /// The table that may hold `user_key`, honoring the floor.
    pub fn candidate(&self, user_key: &[u8]) -> Option<&TableRef> {
        if self.floor.as_deref().is_some_and(|f| user_key <= f) {
            return None;
        }
        find_covering(&self.tables, user_key)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BufferLevelState {
    /// Oldest first.
    pub del_segments: Vec<Segment>,
    /// Oldest first.
    pub app_segments: Vec<Segment>,
    pub marker: Option<Vec<u8>>,
    pub round_id: u64,
}

impl BufferLevelState {
    pub fn size(&self) -> u64 {
        self.segments().map(Segment::size).sum()
    }

    pub fn table_count(&self) -> usize {
        self.segments().map(|s| s.tables.len()).sum()
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.del_segments.iter().chain(self.app_segments.iter())
    }

    pub fn tables(&self) -> impl Iterator<Item = &TableRef> {
        self.segments().flat_map(|s| s.tables.iter())
    }

    pub fn is_empty(&self) -> bool {
        self.segments().all(|s| s.tables.is_empty())
    }
}

pub fn total(tables: &[TableRef]) -> u64 {
    tables.iter().map(|t| t.size).sum()
}

/// Binary search in a sorted, non-overlapping run.
pub fn find_covering<'a>(run: &'a [TableRef], user_key: &[u8]) -> Option<&'a TableRef> {
    let i = run.partition_point(|t| t.largest_key() < user_key);
    run.get(i).filter(|t| t.smallest_key() <= user_key)
}

/// Tables of a sorted run whose ranges intersect `[lo, hi]`.
pub fn overlapping(run: &[TableRef], lo: &[u8], hi: &[u8]) -> Vec<TableRef> {
    let start = run.partition_point(|t| t.largest_key() < lo);
    run[start..]
        .iter()
        .take_while(|t| t.smallest_key() <= hi)
        .cloned()
        .collect()
}

fn sorted_run(run: &[TableRef]) -> Result<(), String> {
    for w in run.windows(2) {
        if w[0].largest_key() >= w[1].smallest_key() {
            return Err(format!("tables {} and {} overlap or are out of order", w[0].file_no, w[1].file_no));
        }
    }
    Ok(())
}

fn insert_sorted(run: &mut Vec<TableRef>, t: TableRef) {
    let i = run.partition_point(|x| x.smallest_key() < t.smallest_key());
    debug_assert!(i == 0 || run[i - 1].largest_key() < t.smallest_key(), "overlap inserting {t:?}");
    debug_assert!(i == run.len() || t.largest_key() < run[i].smallest_key(), "overlap inserting {t:?}");
    run.insert(i, t);
}

fn remove_file(run: &mut Vec<TableRef>, file_no: u64) -> bool {
    match run.iter().position(|t| t.file_no == file_no) {
        Some(i) => {
            run.remove(i);
            true
        }
        None => false,
    }
}

fn max_key(a: Option<Vec<u8>>, b: &[u8]) -> Vec<u8> {
    match a {
        Some(a) if a.as_slice() > b => a,
        _ => b.to_vec(),
    }
}

/// One atomic step of layout change. Level numbers are 1-based.
#[derive(Debug, Clone)]
pub enum EditOp {
    AddTable { level: u32, part: Part, table: TableRef },
    RemoveTable { level: u32, part: Part, file_no: u64 },
    /// Stepped merge: a new newest run.
    PushRun { level: u32, tables: Vec<TableRef> },
    ClearRuns { level: u32 },
    SetCursor { level: u32, key: Option<Vec<u8>> },
    /// `ins` becomes `del`, the cursor resets, the round advances.
    RotateLevel { level: u32 },
    SetRound { level: u32, round: u64 },
    /// Appends to the newest app segment when its origin matches, else
    /// opens a new segment.
    BufferAppend { level: u32, source_level: u32, source_round: u64, table: TableRef },
    /// Whole segment, used by snapshots.
    BufferSegment { level: u32, part: Part, segment: Segment },
    BufferRemove { level: u32, file_no: u64 },
    /// Sets the marker and raises the floor of every del segment.
    AdvanceMarker { level: u32, key: Vec<u8> },
    /// App segments become del segments. With `keep_del`, current del
    /// segments stay in front of them; otherwise they must be empty.
    RotateBuffer { level: u32, keep_del: bool },
    /// Sets the marker alone, leaving floors untouched.
    SetMarker { level: u32, key: Option<Vec<u8>> },
    SetBufferRound { level: u32, round: u64 },
    ClearBuffer { level: u32 },
    SetLastSeq(u64),
    SetLogNumber(u64),
    SetNextFile(u64),
}

#[derive(Debug, Clone, Default)]
pub struct VersionEdit {
    pub ops: Vec<EditOp>,
}

impl VersionEdit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, op: EditOp) {
        self.ops.push(op);
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn extend(&mut self, other: VersionEdit) {
        self.ops.extend(other.ops);
    }
}

#[derive(Debug, Clone)]
pub struct Version {
    pub id: u64,
    /// Index 0 is level 1.
    pub levels: Vec<LevelState>,
    /// Index 0 is buffer level 1; there are k - 1 of them.
    pub buffer: Vec<BufferLevelState>,
    pub last_seq: u64,
    pub log_number: u64,
    pub next_file_no: u64,
    /// Bumped once per applied edit.
    pub clock: u64,
}

impl Version {
    pub fn empty(levels: u32) -> Self {
        Version {
            id: 0,
            levels: vec![LevelState::default(); levels as usize],
            buffer: vec![BufferLevelState::default(); levels as usize - 1],
            last_seq: 0,
            log_number: 0,
            next_file_no: 1,
            clock: 0,
        }
    }

    /// k.
    pub fn num_levels(&self) -> u32 {
        self.levels.len() as u32
    }

    pub fn level(&self, i: u32) -> &LevelState {
        &self.levels[i as usize - 1]
    }

    fn level_mut(&mut self, i: u32) -> &mut LevelState {
        &mut self.levels[i as usize - 1]
    }

    pub fn buffer_level(&self, i: u32) -> &BufferLevelState {
        &self.buffer[i as usize - 1]
    }

    fn buffer_mut(&mut self, i: u32) -> &mut BufferLevelState {
        &mut self.buffer[i as usize - 1]
    }

    pub fn last_level(&self) -> &LevelState {
        self.levels.last().unwrap()
    }

    /// Every table referenced, deduplicated by file number (a chunk may
    /// be shared between a level and a buffer level).
    pub fn live_files(&self) -> HashMap<u64, TableRef> {
        let mut out = HashMap::new();
        for t in self.levels.iter().flat_map(|l| l.tables()) {
            out.entry(t.file_no).or_insert_with(|| t.clone());
        }
        for t in self.buffer.iter().flat_map(|b| b.tables()) {
            out.entry(t.file_no).or_insert_with(|| t.clone());
        }
        out
    }

    pub fn lsm_bytes(&self) -> u64 {
        self.levels.iter().map(LevelState::size).sum()
    }

    pub fn buffer_bytes(&self) -> u64 {
        self.buffer.iter().map(BufferLevelState::size).sum()
    }

    /// Number of parts (C_i^ins, C_i^del, SM runs) at levels below k whose
    /// key range covers `user_key`.
    pub fn covering_parts(&self, user_key: &[u8]) -> usize {
        let k = self.num_levels();
        let covers = |run: &[TableRef]| match (run.first(), run.last()) {
            (Some(a), Some(b)) => a.smallest_key() <= user_key && user_key <= b.largest_key(),
            _ => false,
        };
        (1..k)
            .map(|i| {
                let l = self.level(i);
                covers(&l.ins) as usize + covers(&l.del) as usize + l.runs.iter().filter(|r| covers(r)).count()
            })
            .sum()
    }

    /// Structural invariants every published version must satisfy.
    pub fn check(&self, opts: &Options) -> Result<(), String> {
        let k = self.num_levels();
        for i in 1..=k {
            let l = self.level(i);
            sorted_run(&l.ins).map_err(|e| format!("L{i} ins: {e}"))?;
            sorted_run(&l.del).map_err(|e| format!("L{i} del: {e}"))?;
            for (n, r) in l.runs.iter().enumerate() {
                sorted_run(r).map_err(|e| format!("L{i} run {n}: {e}"))?;
            }
            if i == k {
                if !l.del.is_empty() || !l.runs.is_empty() {
                    return Err(format!("L{k} must be a single run"));
                }
                continue;
            }
            match opts.strategy {
                Strategy::SteppedMerge => {
                    if l.runs.len() > opts.size_ratio as usize {
                        return Err(format!("L{i} holds {} runs", l.runs.len()));
                    }
                }
                _ => {
                    if l.size() > opts.hard_capacity(i) {
                        return Err(format!("L{i} holds {} bytes, cap {}", l.size(), opts.hard_capacity(i)));
                    }
                }
            }
            if let (Some(c), Some(t)) = (&l.cursor, l.del.first()) {
                if t.largest_key() <= c.as_slice() {
                    return Err(format!("L{i} del table {} lies behind the cursor", t.file_no));
                }
            }
        }
        for (idx, b) in self.buffer.iter().enumerate() {
            for s in b.segments() {
                sorted_run(&s.tables).map_err(|e| format!("D{} segment: {e}", idx + 1))?;
            }
        }
        Ok(())
    }

    pub fn apply(&self, edit: &VersionEdit) -> Version {
        let mut v = self.clone();
        v.id += 1;
        v.clock += 1;
        for op in &edit.ops {
            v.apply_op(op);
        }
        v
    }

    fn apply_op(&mut self, op: &EditOp) {
        let clock = self.clock;
        match op {
            EditOp::AddTable { level, part, table } => {
                insert_sorted(self.level_mut(*level).part_mut(*part), table.clone());
            }
            EditOp::RemoveTable { level, part, file_no } => {
                let found = remove_file(self.level_mut(*level).part_mut(*part), *file_no);
                debug_assert!(found, "file {file_no} not in level {level} {part:?}");
            }
            EditOp::PushRun { level, tables } => self.level_mut(*level).runs.push(tables.clone()),
            EditOp::ClearRuns { level } => self.level_mut(*level).runs.clear(),
            EditOp::SetCursor { level, key } => self.level_mut(*level).cursor = key.clone(),
            EditOp::RotateLevel { level } => {
                let l = self.level_mut(*level);
                debug_assert!(l.del.is_empty(), "rotating level {level} with a non-empty del part");
                let ins = std::mem::take(&mut l.ins);
                l.del.extend(ins);
                l.cursor = None;
                l.round_id += 1;
            }
            EditOp::SetRound { level, round } => self.level_mut(*level).round_id = *round,
            EditOp::BufferAppend {
                level,
                source_level,
                source_round,
                table,
            } => {
                let b = self.buffer_mut(*level);
                let reuse = b
                    .app_segments
                    .last()
                    .is_some_and(|s| s.source_level == *source_level && s.source_round == *source_round);
                if !reuse {
                    b.app_segments.push(Segment {
                        tables: Vec::new(),
                        source_level: *source_level,
                        source_round: *source_round,
                        created_at: clock,
                        floor: None,
                    });
                }
                insert_sorted(&mut b.app_segments.last_mut().unwrap().tables, table.clone());
            }
            EditOp::BufferSegment { level, part, segment } => {
                let b = self.buffer_mut(*level);
                match part {
                    Part::Del => b.del_segments.push(segment.clone()),
                    Part::Ins => b.app_segments.push(segment.clone()),
                }
            }
            EditOp::BufferRemove { level, file_no } => {
                let b = self.buffer_mut(*level);
                let mut found = false;
                for s in b.del_segments.iter_mut().chain(b.app_segments.iter_mut()) {
                    if remove_file(&mut s.tables, *file_no) {
                        found = true;
                        break;
                    }
                }
                debug_assert!(found, "file {file_no} not in buffer level {level}");
                b.del_segments.retain(|s| !s.tables.is_empty());
                b.app_segments.retain(|s| !s.tables.is_empty());
            }
            EditOp::AdvanceMarker { level, key } => {
                let b = self.buffer_mut(*level);
                b.marker = Some(key.clone());
                for s in &mut b.del_segments {
                    s.floor = Some(max_key(s.floor.take(), key));
                }
            }
            EditOp::RotateBuffer { level, keep_del } => {
                let b = self.buffer_mut(*level);
                if !keep_del {
                    debug_assert!(b.del_segments.is_empty(), "rotating buffer level {level} with del segments");
                    b.del_segments.clear();
                }
                let app = std::mem::take(&mut b.app_segments);
                b.del_segments.extend(app);
                if !keep_del {
                    b.marker = None;
                }
                b.round_id += 1;
            }
            EditOp::SetMarker { level, key } => self.buffer_mut(*level).marker = key.clone(),
            EditOp::SetBufferRound { level, round } => self.buffer_mut(*level).round_id = *round,
            EditOp::ClearBuffer { level } => {
                let b = self.buffer_mut(*level);
                b.del_segments.clear();
                b.app_segments.clear();
                b.marker = None;
            }
            EditOp::SetLastSeq(s) => self.last_seq = self.last_seq.max(*s),
            EditOp::SetLogNumber(n) => self.log_number = *n,
            EditOp::SetNextFile(n) => self.next_file_no = self.next_file_no.max(*n),
        }
    }

    /// An edit that rebuilds this version from `Version::empty`.
    pub fn snapshot_edit(&self) -> VersionEdit {
        let mut e = VersionEdit::new();
        for (idx, l) in self.levels.iter().enumerate() {
            let level = idx as u32 + 1;
            for part in [Part::Ins, Part::Del] {
                for t in l.part(part) {
                    e.push(EditOp::AddTable {
                        level,
                        part,
                        table: t.clone(),
                    });
                }
            }
            for run in &l.runs {
                e.push(EditOp::PushRun {
                    level,
                    tables: run.clone(),
                });
            }
            e.push(EditOp::SetCursor {
                level,
                key: l.cursor.clone(),
            });
            e.push(EditOp::SetRound {
                level,
                round: l.round_id,
            });
        }
        for (idx, b) in self.buffer.iter().enumerate() {
            let level = idx as u32 + 1;
            for s in &b.del_segments {
                e.push(EditOp::BufferSegment {
                    level,
                    part: Part::Del,
                    segment: s.clone(),
                });
            }
            for s in &b.app_segments {
                e.push(EditOp::BufferSegment {
                    level,
                    part: Part::Ins,
                    segment: s.clone(),
                });
            }
            // segments carry their own floors
            e.push(EditOp::SetMarker {
                level,
                key: b.marker.clone(),
            });
            e.push(EditOp::SetBufferRound {
                level,
                round: b.round_id,
            });
        }
        e.push(EditOp::SetLastSeq(self.last_seq));
        e.push(EditOp::SetLogNumber(self.log_number));
        e.push(EditOp::SetNextFile(self.next_file_no));
        e
    }
}
