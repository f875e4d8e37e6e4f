//! Discrete-event simulation of compaction over uniformly random keys.
//!
//! Keys are random `u64`s and every level is a set of them, so overlaps,
//! fan-in and part coverage come out of the key layout rather than from
//! the formulas being checked. Time advances one memtable of writes at a
//! time. Two-phase levels take the memtable whole, as a flush; plain LSM
//! treats the memtable as level 0 and takes it a table at a time. After
//! each merge every level is brought back under capacity by moving chunks
//! of `entries_per_table` keys down, top first.
//!
//! Plain LSM chunks are runs of consecutive keys starting at a uniformly
//! chosen key. Choosing by key rather than by position keeps the expected
//! overlap at the size ratio even where a level is patchy.
//!
//! The last level stays at S_k: each chunk merged into it replaces as
//! many randomly chosen keys of the merged range, as updates would.

use std::collections::{BTreeSet, VecDeque};
use std::ops::Bound;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LsmModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimStrategy {
    /// Rolling merges: each chunk merges with everything it overlaps.
    PlainLsm,
    /// Insertion/deletion parts per level, plus compaction buffer
    /// bookkeeping.
    TwoPhase,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Keys per memtable; fixes the granularity of everything else.
    pub entries_per_memtable: usize,
    /// Keys per table, which is also the chunk moved per step.
    pub entries_per_table: usize,
    pub seed: u64,
    /// Simulated time before measurement starts. `None` means one full
    /// round of level k-1.
    pub warmup: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            entries_per_memtable: 512,
            entries_per_table: 16,
            seed: 1,
            warmup: None,
        }
    }
}

/// Measurements for one level, all time-averaged over the run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimLevel {
    pub level: u32,
    /// Mean size relative to S_i.
    pub fill: f64,
    /// Bytes merged into the level per unit time, over S_i.
    pub rewrite_fraction: f64,
    /// Target bytes merged per incoming byte.
    pub fan_in_avg: f64,
    /// Parts whose key range covers a random probe key.
    pub overlap_time_avg: f64,
    /// Bytes entering the buffer level per unit time over its mean size.
    /// For the last level, which is never buffered, its own rewrite rate.
    pub buffer_update_fraction: Option<f64>,
    /// Bytes released from the buffer level per unit time over its mean
    /// size.
    pub buffer_release_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub strategy: SimStrategy,
    /// Measured time, excluding warm-up.
    pub duration: f64,
    pub flushes: u64,
    pub levels: Vec<SimLevel>,
    /// Mean share of on-disk keys held by levels 1..k-1.
    pub upper_fraction: f64,
}

type Span = (Bound<u64>, Bound<u64>);

const FULL: Span = (Bound::Unbounded, Bound::Unbounded);

const BUCKET_BITS: u32 = 12;

/// A set of keys split by their top bits, so a key of given rank can be
/// found without walking the whole set.
struct KeySet {
    buckets: Vec<BTreeSet<u64>>,
    len: usize,
    /// No bucket below this one holds a key.
    low: usize,
}

impl KeySet {
    fn new() -> Self {
        KeySet {
            buckets: (0..1 << BUCKET_BITS).map(|_| BTreeSet::new()).collect(),
            len: 0,
            low: 0,
        }
    }

    fn bucket(key: u64) -> usize {
        (key >> (64 - BUCKET_BITS)) as usize
    }

    fn len(&self) -> usize {
        self.len
    }

    fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn insert(&mut self, key: u64) {
        let b = Self::bucket(key);
        if self.buckets[b].insert(key) {
            self.len += 1;
            self.low = self.low.min(b);
        }
    }

    fn extend(&mut self, keys: impl IntoIterator<Item = u64>) {
        keys.into_iter().for_each(|k| self.insert(k));
    }

    fn remove(&mut self, key: u64) {
        if self.buckets[Self::bucket(key)].remove(&key) {
            self.len -= 1;
        }
    }

    fn pop_first(&mut self) -> Option<u64> {
        while self.low < self.buckets.len() {
            if let Some(k) = self.buckets[self.low].pop_first() {
                self.len -= 1;
                return Some(k);
            }
            self.low += 1;
        }
        None
    }

    fn range(&self, (lo, hi): Span) -> impl DoubleEndedIterator<Item = u64> + '_ {
        let first = match lo {
            Bound::Included(k) | Bound::Excluded(k) => Self::bucket(k),
            Bound::Unbounded => 0,
        };
        let last = match hi {
            Bound::Included(k) | Bound::Excluded(k) => Self::bucket(k),
            Bound::Unbounded => self.buckets.len() - 1,
        };
        (first..=last).flat_map(move |b| self.buckets[b].range((lo, hi)).copied())
    }

    fn first(&self) -> Option<u64> {
        self.buckets[self.low.min(self.buckets.len() - 1)..]
            .iter()
            .find_map(|b| b.first().copied())
    }

    fn last(&self) -> Option<u64> {
        self.buckets.iter().rev().find_map(|b| b.last().copied())
    }

    fn nth(&self, mut n: usize) -> Option<u64> {
        for b in &self.buckets {
            if n < b.len() {
                return b.iter().nth(n).copied();
            }
            n -= b.len();
        }
        None
    }

    /// Fraction of the key space between the smallest and largest key.
    fn coverage(&self) -> f64 {
        match (self.first(), self.last()) {
            (Some(a), Some(b)) => (b - a) as f64 / u64::MAX as f64,
            _ => 0.0,
        }
    }

    /// Removes `n` consecutive keys, wrapping around the end of the key
    /// space, starting at a uniformly chosen one. Returns them with the
    /// key ranges from the preceding key up to the last one taken.
    fn take_run(&mut self, n: usize, rng: &mut ChaCha8Rng) -> (Vec<u64>, Vec<Span>) {
        if self.len <= n {
            let all: Vec<u64> = self.range(FULL).collect();
            all.iter().for_each(|&k| self.remove(k));
            return (all, vec![FULL]);
        }
        let start = self.nth(rng.gen_range(0..self.len)).unwrap();
        let mut run: Vec<u64> = self.range((Bound::Included(start), Bound::Unbounded)).take(n).collect();
        let wrapped = run.len() < n;
        if wrapped {
            let more = n - run.len();
            run.extend(self.range(FULL).take(more));
        }
        let prev = self
            .range((Bound::Unbounded, Bound::Excluded(start)))
            .next_back()
            .or(self.last())
            .unwrap();
        let end = *run.last().unwrap();
        let spans = if prev < end && !wrapped {
            vec![(Bound::Excluded(prev), Bound::Included(end))]
        } else {
            vec![(Bound::Excluded(prev), Bound::Unbounded), (Bound::Unbounded, Bound::Included(end))]
        };
        run.iter().for_each(|&k| self.remove(k));
        (run, spans)
    }
}

struct Level {
    /// The whole level for plain LSM and for the last level.
    ins: KeySet,
    del: KeySet,
    /// Keys up to here have been moved down this round.
    cursor: Option<u64>,
    round: u64,
    cap: usize,
}

impl Level {
    fn new(cap: usize) -> Self {
        Level {
            ins: KeySet::new(),
            del: KeySet::new(),
            cursor: None,
            round: 0,
            cap,
        }
    }

    fn len(&self) -> usize {
        self.ins.len() + self.del.len()
    }
}

struct BufTable {
    max: u64,
    n: usize,
}

#[derive(Default)]
struct BufLevel {
    del: Vec<VecDeque<BufTable>>,
    app: Vec<Vec<BufTable>>,
    app_round: Option<u64>,
}

impl BufLevel {
    fn len(&self) -> usize {
        let d: usize = self.del.iter().flatten().map(|t| t.n).sum();
        let a: usize = self.app.iter().flatten().map(|t| t.n).sum();
        d + a
    }

    /// Drops del tables wholly at or below `cursor` (all of them for
    /// `None`); returns keys freed.
    fn release(&mut self, cursor: Option<u64>) -> usize {
        let mut freed = 0;
        for seg in &mut self.del {
            while seg.front().is_some_and(|t| cursor.is_none_or(|c| t.max <= c)) {
                freed += seg.pop_front().unwrap().n;
            }
        }
        self.del.retain(|s| !s.is_empty());
        freed
    }
}

#[derive(Default, Clone)]
struct Acc {
    merged: u64,
    incoming: u64,
    overlap: u64,
    size_sum: f64,
    cover_sum: f64,
    buf_size_sum: f64,
    buf_in: u64,
    buf_out: u64,
}

fn tables_of(keys: &[u64], per_table: usize) -> Vec<BufTable> {
    keys.chunks(per_table)
        .map(|c| BufTable {
            max: *c.last().unwrap(),
            n: c.len(),
        })
        .collect()
}

struct Sim {
    strategy: SimStrategy,
    per_table: usize,
    /// Plain LSM only: the memtable as a level of `s0` keys.
    l0: KeySet,
    s0: usize,
    levels: Vec<Level>,
    buffer: Vec<BufLevel>,
    acc: Vec<Acc>,
    measuring: bool,
    rng: ChaCha8Rng,
}

impl Sim {
    fn k(&self) -> usize {
        self.levels.len()
    }

    /// Merges `chunk`, whose keys lie in `spans`, into level index `t`.
    fn merge_down(&mut self, t: usize, chunk: Vec<u64>, spans: &[Span]) {
        let last = t + 1 == self.k();
        let n = chunk.len();
        let target = &self.levels[t].ins;
        let overlap: usize = spans.iter().map(|&s| target.range(s).count()).sum();
        if self.measuring {
            let a = &mut self.acc[t];
            a.merged += (n + overlap) as u64;
            a.incoming += n as u64;
            a.overlap += overlap as u64;
        }
        if last {
            let mut merged: Vec<u64> = spans.iter().flat_map(|&s| target.range(s)).collect();
            merged.extend(chunk.iter().copied());
            let l = &mut self.levels[t];
            l.ins.extend(chunk);
            for i in sample(&mut self.rng, merged.len(), n) {
                l.ins.remove(merged[i]);
            }
        } else {
            self.levels[t].ins.extend(chunk);
        }
    }

    fn flush(&mut self, keys: Vec<u64>) {
        if self.strategy == SimStrategy::TwoPhase {
            let tables = tables_of(&keys, self.per_table);
            let n = keys.len();
            self.buffer[0].app.push(tables);
            if self.measuring {
                self.acc[0].buf_in += n as u64;
            }
            self.merge_down(0, keys, &[FULL]);
            self.cascade();
            return;
        }
        // key by key, keeping level 0 within half a table of S0 so that
        // chunks leave it at its nominal density
        for key in keys {
            self.l0.insert(key);
            if self.l0.len() > self.s0 + self.per_table / 2 {
                let (chunk, spans) = self.l0.take_run(self.per_table, &mut self.rng);
                self.merge_down(0, chunk, &spans);
                self.cascade();
            }
        }
    }

    fn cascade(&mut self) {
        let two_phase = self.strategy == SimStrategy::TwoPhase;
        for i in 0..self.k() - 1 {
            loop {
                let l = &self.levels[i];
                if two_phase && l.del.is_empty() && l.ins.len() >= l.cap {
                    self.rotate(i);
                } else if l.len() > l.cap {
                    self.step(i);
                } else {
                    break;
                }
            }
        }
    }

    fn rotate(&mut self, i: usize) {
        let l = &mut self.levels[i];
        std::mem::swap(&mut l.ins, &mut l.del);
        l.cursor = None;
        l.round += 1;
        let b = &mut self.buffer[i];
        debug_assert!(b.del.is_empty());
        b.del = b.app.drain(..).map(VecDeque::from).collect();
        b.app_round = None;
    }

    /// Moves one chunk from level index `i` to `i + 1`.
    fn step(&mut self, i: usize) {
        let per_table = self.per_table;
        if self.strategy == SimStrategy::PlainLsm {
            let (chunk, spans) = self.levels[i].ins.take_run(per_table, &mut self.rng);
            self.merge_down(i + 1, chunk, &spans);
            return;
        }
        if self.levels[i].del.is_empty() {
            self.rotate(i);
        }
        // the deletion part is consumed in key order
        let l = &mut self.levels[i];
        let chunk: Vec<u64> = (0..per_table).map_while(|_| l.del.pop_first()).collect();
        let lo = l.cursor.map_or(Bound::Unbounded, Bound::Excluded);
        let hi = if l.del.is_empty() { None } else { chunk.last().copied() };
        l.cursor = hi;
        let round = l.round;

        let freed = self.buffer[i].release(hi);
        if i + 1 < self.buffer.len() {
            let b = &mut self.buffer[i + 1];
            if b.app_round != Some(round) {
                b.app.push(Vec::new());
                b.app_round = Some(round);
            }
            b.app.last_mut().unwrap().push(BufTable {
                max: *chunk.last().unwrap(),
                n: chunk.len(),
            });
        }
        if self.measuring {
            self.acc[i].buf_out += freed as u64;
            if i + 1 < self.buffer.len() {
                self.acc[i + 1].buf_in += chunk.len() as u64;
            }
        }
        let span = (lo, hi.map_or(Bound::Unbounded, Bound::Included));
        self.merge_down(i + 1, chunk, &[span]);
    }

    fn sample(&mut self) {
        let k = self.k();
        for i in 0..k {
            let l = &self.levels[i];
            let cover = if self.strategy == SimStrategy::TwoPhase && i + 1 < k {
                l.ins.coverage() + l.del.coverage()
            } else {
                l.ins.coverage()
            };
            let a = &mut self.acc[i];
            a.size_sum += l.len() as f64;
            a.cover_sum += cover;
            if i < self.buffer.len() {
                a.buf_size_sum += self.buffer[i].len() as f64;
            }
        }
    }
}

/// Runs the model for `duration` units of simulated time after warm-up.
pub fn simulate_compaction(
    p: &LsmModelParams<f64>,
    strategy: SimStrategy,
    duration: f64,
    cfg: &SimConfig,
) -> Result<SimReport> {
    p.validate()?;
    if p.k < 2 {
        return Err(Error::Domain("the simulator needs at least two levels".into()));
    }
    if cfg.entries_per_table == 0 || cfg.entries_per_memtable < cfg.entries_per_table {
        return Err(Error::Domain("a memtable must hold at least one table".into()));
    }
    if !(duration > 0.0) {
        return Err(Error::Domain("duration must be positive".into()));
    }
    let k = p.k as usize;
    let s0 = cfg.entries_per_memtable;
    let r = p.r as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // start every level full, two-phase levels at a random point of their
    // round
    let mut levels = Vec::with_capacity(k);
    let mut cap = s0;
    for i in 0..k {
        cap *= r;
        let mut l = Level::new(cap);
        if strategy == SimStrategy::TwoPhase && i + 1 < k {
            let phase: f64 = rng.gen();
            let cursor = (phase * u64::MAX as f64) as u64;
            l.cursor = Some(cursor);
            for _ in 0..cap {
                let key: u64 = rng.gen();
                if key > cursor {
                    l.del.insert(key);
                }
            }
            for _ in 0..(phase * cap as f64) as usize {
                l.ins.insert(rng.gen());
            }
        } else {
            while l.ins.len() < cap {
                l.ins.insert(rng.gen());
            }
        }
        levels.push(l);
    }
    let mut l0 = KeySet::new();
    while strategy == SimStrategy::PlainLsm && l0.len() < s0 {
        l0.insert(rng.gen());
    }

    let mut sim = Sim {
        strategy,
        per_table: cfg.entries_per_table,
        l0,
        s0,
        levels,
        buffer: (0..k - 1).map(|_| BufLevel::default()).collect(),
        acc: vec![Acc::default(); k],
        measuring: false,
        rng,
    };
    let flush_time = p.s0 / p.w0;
    let warmup = cfg.warmup.unwrap_or((p.r as f64).powi(p.k as i32 - 1) * flush_time);
    let warm_flushes = (warmup / flush_time).ceil() as u64;
    let flushes = ((duration / flush_time).round() as u64).max(1);
    for n in 0..warm_flushes + flushes {
        sim.measuring = n >= warm_flushes;
        if sim.measuring {
            sim.sample();
        }
        let mut keys: Vec<u64> = (0..s0).map(|_| sim.rng.gen()).collect();
        keys.sort_unstable();
        keys.dedup();
        sim.flush(keys);
    }

    let time = flushes as f64 * flush_time;
    let samples = flushes as f64;
    let mut out = Vec::with_capacity(k);
    let mut upper = 0.0;
    let mut all = 0.0;
    for (i, a) in sim.acc.iter().enumerate() {
        let cap = sim.levels[i].cap as f64;
        let rewrite = a.merged as f64 / cap / time;
        let avg_buf = a.buf_size_sum / samples;
        let (bu, br) = if strategy != SimStrategy::TwoPhase {
            (None, None)
        } else if i + 1 < k {
            (
                Some(a.buf_in as f64 / avg_buf / time),
                Some(a.buf_out as f64 / avg_buf / time),
            )
        } else {
            (Some(rewrite), Some(rewrite))
        };
        let avg = a.size_sum / samples;
        all += avg;
        if i + 1 < k {
            upper += avg;
        }
        out.push(SimLevel {
            level: i as u32 + 1,
            fill: avg / cap,
            rewrite_fraction: rewrite,
            fan_in_avg: if a.incoming > 0 { a.overlap as f64 / a.incoming as f64 } else { 0.0 },
            overlap_time_avg: a.cover_sum / samples,
            buffer_update_fraction: bu,
            buffer_release_fraction: br,
        });
    }
    Ok(SimReport {
        strategy,
        duration: time,
        flushes,
        levels: out,
        upper_fraction: upper / all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(r: u32, k: u32) -> LsmModelParams<f64> {
        LsmModelParams::new(1.0, 1.0, r, k).unwrap()
    }

    #[test]
    fn key_set_runs_wrap_around() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = KeySet::new();
        s.extend([10, 20, u64::MAX - 5, 1 << 63]);
        assert_eq!(s.first(), Some(10));
        assert_eq!(s.last(), Some(u64::MAX - 5));
        assert_eq!(s.nth(2), Some(1 << 63));
        let mut seen = BTreeSet::new();
        while !s.is_empty() {
            let before: Vec<u64> = s.range(FULL).collect();
            let (run, spans) = s.take_run(3, &mut rng);
            // every key in the spans was in the run
            for k in before {
                let inside = spans.iter().any(|sp| std::ops::RangeBounds::contains(sp, &k));
                assert_eq!(inside, run.contains(&k), "{k} {spans:?}");
            }
            seen.extend(run);
        }
        assert_eq!(seen.len(), 4);
        assert_eq!(s.pop_first(), None);
    }

    #[test]
    fn plain_fan_in_is_r() {
        let rep = simulate_compaction(&params(4, 3), SimStrategy::PlainLsm, 200.0, &SimConfig::default()).unwrap();
        for l in &rep.levels {
            assert!((l.fan_in_avg - 4.0).abs() < 0.2, "{l:?}");
            assert!((l.overlap_time_avg - 1.0).abs() < 0.05, "{l:?}");
        }
    }

    #[test]
    fn two_phase_halves_fan_in() {
        let rep = simulate_compaction(&params(4, 3), SimStrategy::TwoPhase, 200.0, &SimConfig::default()).unwrap();
        for l in &rep.levels[..2] {
            assert!((l.fan_in_avg - 2.0).abs() < 0.55, "{l:?}");
            assert!((l.overlap_time_avg - 1.5).abs() < 0.2, "{l:?}");
        }
        assert!((rep.levels[2].fan_in_avg - 4.0).abs() < 0.2);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SimConfig::default();
        let a = simulate_compaction(&params(2, 2), SimStrategy::TwoPhase, 20.0, &cfg).unwrap();
        let b = simulate_compaction(&params(2, 2), SimStrategy::TwoPhase, 20.0, &cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate_compaction(&params(2, 2), SimStrategy::TwoPhase, 20.0, &SimConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = SimConfig::default();
        assert!(simulate_compaction(&params(4, 1), SimStrategy::PlainLsm, 1.0, &cfg).is_err());
        assert!(simulate_compaction(&params(4, 2), SimStrategy::PlainLsm, 0.0, &cfg).is_err());
        let tiny = SimConfig {
            entries_per_memtable: 4,
            entries_per_table: 8,
            ..cfg
        };
        assert!(simulate_compaction(&params(4, 2), SimStrategy::PlainLsm, 1.0, &tiny).is_err());
    }
}
