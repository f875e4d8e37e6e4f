//! Runs a workload against an open database and samples metrics once per
//! second.
//!
//! Two clocks are supported. `Clock::Wall` is the real thing: one writer
//! thread and one or more reader threads, each paced open-loop against
//! absolute deadlines, with a sampler on the calling thread. `Clock::Virtual`
//! plays the same streams on one thread, a simulated second at a time, with
//! every operation interleaved at its nominal time; the result depends only
//! on the spec, so traces under different strategies are identical.

use std::io;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use dlsm::{CacheStats, Db, MetricsSnapshot};
use parking_lot::Mutex;

use crate::workload::{user_key, value_for, History, ReadOp, Reads, WorkloadSpec, Writes};
use crate::BenchError;

pub const CSV_HEADER: [&str; 7] = [
    "ts_sec",
    "hit_ratio",
    "read_qps",
    "write_qps",
    "p50_us",
    "p99_us",
    "blocks_invalidated",
];

/// One second of measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSample {
    pub ts_sec: u64,
    /// Zero when the window saw no cache lookups; see `hit_ratio_defined`.
    pub hit_ratio: f64,
    pub hit_ratio_defined: bool,
    pub read_qps: f64,
    pub write_qps: f64,
    pub p50_us: u64,
    pub p99_us: u64,
    /// Cached blocks dropped because their file was deleted.
    pub blocks_invalidated: u64,
    /// Bytes written by compactions.
    pub compaction_bytes: u64,
    pub(crate) latency_sum_us: u64,
    pub(crate) reads: u64,
}

impl MetricsSample {
    fn from_window(
        ts_sec: u64,
        secs: f64,
        cache: &CacheStats,
        metrics: &MetricsSnapshot,
        writes: u64,
        mut latencies: Vec<u64>,
    ) -> Self {
        latencies.sort_unstable();
        let pct = |p: f64| -> u64 {
            if latencies.is_empty() {
                return 0;
            }
            let rank = (p * latencies.len() as f64).ceil() as usize;
            latencies[rank.clamp(1, latencies.len()) - 1]
        };
        let reads = latencies.len() as u64;
        MetricsSample {
            ts_sec,
            hit_ratio: cache.hit_ratio().unwrap_or(0.0),
            hit_ratio_defined: cache.hit_ratio().is_some(),
            read_qps: reads as f64 / secs,
            write_qps: writes as f64 / secs,
            p50_us: pct(0.50),
            p99_us: pct(0.99),
            blocks_invalidated: cache.invalidations,
            compaction_bytes: metrics.compaction_bytes_written,
            latency_sum_us: latencies.iter().sum(),
            reads,
        }
    }

    fn record(&self) -> [String; 7] {
        [
            self.ts_sec.to_string(),
            format!("{:.4}", self.hit_ratio),
            format!("{:.1}", self.read_qps),
            format!("{:.1}", self.write_qps),
            self.p50_us.to_string(),
            self.p99_us.to_string(),
            self.blocks_invalidated.to_string(),
        ]
    }
}

/// Writes samples as CSV, flushing after every row so an aborted run
/// leaves everything it measured behind.
pub struct SampleWriter<W: io::Write> {
    out: csv::Writer<W>,
}

impl<W: io::Write> SampleWriter<W> {
    pub fn new(out: W) -> Result<Self, BenchError> {
        let mut out = csv::Writer::from_writer(out);
        out.write_record(CSV_HEADER)?;
        out.flush()?;
        Ok(SampleWriter { out })
    }

    pub fn write(&mut self, s: &MetricsSample) -> Result<(), BenchError> {
        self.out.write_record(s.record())?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub samples: Vec<MetricsSample>,
    /// Mean of the per-second hit ratios that are defined.
    pub avg_hit_ratio: f64,
    pub avg_read_qps: f64,
    pub avg_write_qps: f64,
    pub avg_latency_us: f64,
    pub blocks_invalidated: u64,
    pub compaction_bytes: u64,
}

impl Summary {
    pub fn of(samples: Vec<MetricsSample>) -> Self {
        let n = samples.len().max(1) as f64;
        let defined: Vec<f64> = samples.iter().filter(|s| s.hit_ratio_defined).map(|s| s.hit_ratio).collect();
        let reads: u64 = samples.iter().map(|s| s.reads).sum();
        Summary {
            avg_hit_ratio: if defined.is_empty() {
                0.0
            } else {
                defined.iter().sum::<f64>() / defined.len() as f64
            },
            avg_read_qps: samples.iter().map(|s| s.read_qps).sum::<f64>() / n,
            avg_write_qps: samples.iter().map(|s| s.write_qps).sum::<f64>() / n,
            avg_latency_us: samples.iter().map(|s| s.latency_sum_us).sum::<u64>() as f64 / reads.max(1) as f64,
            blocks_invalidated: samples.iter().map(|s| s.blocks_invalidated).sum(),
            compaction_bytes: samples.iter().map(|s| s.compaction_bytes).sum(),
            samples,
        }
    }

    pub fn render(&self) -> String {
        format!(
            "seconds={} avg_hit_ratio={:.4} avg_read_qps={:.1} avg_write_qps={:.1} avg_latency_us={:.1} blocks_invalidated={} compaction_bytes={}",
            self.samples.len(),
            self.avg_hit_ratio,
            self.avg_read_qps,
            self.avg_write_qps,
            self.avg_latency_us,
            self.blocks_invalidated,
            self.compaction_bytes
        )
    }
}

/// Inserts records `0..records` in key order, then flushes.
pub fn load(db: &Db, records: u64, kv_bytes: usize) -> Result<(), BenchError> {
    for id in 0..records {
        db.put(&user_key(id), &value_for(id, 0, kv_bytes))?;
    }
    db.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    Wall,
    Virtual,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub clock: Clock,
    /// Seconds run before sampling starts.
    pub warmup_sec: u64,
    /// Reader threads under the wall clock.
    pub readers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            clock: Clock::Wall,
            warmup_sec: 60,
            readers: 1,
        }
    }
}

/// Runs `spec` for its warm-up plus duration. Samples after the warm-up
/// go to `sink` as they are taken and are returned in the summary.
pub fn run_benchmark<F>(db: &Db, spec: &WorkloadSpec, opts: &RunOptions, mut sink: F) -> Result<Summary, BenchError>
where
    F: FnMut(&MetricsSample) -> Result<(), BenchError>,
{
    spec.validate()?;
    let mut kept = Vec::new();
    let mut keep = |mut s: MetricsSample, sec: u64| -> Result<(), BenchError> {
        if sec >= opts.warmup_sec {
            s.ts_sec = sec - opts.warmup_sec;
            sink(&s)?;
            kept.push(s);
        }
        Ok(())
    };
    let total = opts.warmup_sec + spec.duration_sec;
    match opts.clock {
        Clock::Virtual => {
            let mut d = Driver::new(db, spec);
            for sec in 0..total {
                let s = d.second()?;
                keep(s, sec)?;
            }
        }
        Clock::Wall => run_wall(db, spec, opts.readers.max(1), total, &mut keep)?,
    }
    Ok(Summary::of(kept))
}

/// Work done in one simulated second.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tick {
    pub writes: u64,
    pub reads: u64,
    /// Aggressive compaction steps.
    pub drain_steps: u64,
}

/// Single-threaded playback of a workload in simulated seconds.
pub struct Driver<'a> {
    db: &'a Db,
    spec: WorkloadSpec,
    history: History,
    reads: Reads,
    writes: Writes,
    sec: u64,
    cache: CacheStats,
    metrics: MetricsSnapshot,
}

impl<'a> Driver<'a> {
    /// Assumes the database holds exactly a fresh load of the workload's records.
    pub fn new(db: &'a Db, spec: &WorkloadSpec) -> Self {
        Driver {
            db,
            spec: spec.clone(),
            history: History::loaded(spec.records),
            reads: Reads::new(spec),
            writes: Writes::new(spec),
            sec: 0,
            cache: db.cache().stats(),
            metrics: db.metrics(),
        }
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    /// Seconds played so far.
    pub fn elapsed(&self) -> u64 {
        self.sec
    }

    /// The next second at the spec's rates. Fractional rates carry over.
    pub fn planned(&self) -> Tick {
        let due = |qps: f64| ((self.sec + 1) as f64 * qps).floor() as u64 - (self.sec as f64 * qps).floor() as u64;
        Tick {
            writes: due(self.spec.write_qps),
            reads: due(self.spec.read_qps),
            drain_steps: 0,
        }
    }

    pub fn second(&mut self) -> Result<MetricsSample, BenchError> {
        self.run(self.planned())
    }

    /// Plays one second. The operations of each stream are spread evenly
    /// over the second and interleaved by their nominal times.
    pub fn run(&mut self, tick: Tick) -> Result<MetricsSample, BenchError> {
        let mut events: Vec<(f64, u8)> = Vec::with_capacity((tick.writes + tick.reads + tick.drain_steps) as usize);
        for (n, tag) in [(tick.writes, 0u8), (tick.reads, 1), (tick.drain_steps, 2)] {
            events.extend((0..n).map(|j| ((j as f64 + 0.5) / n as f64, tag)));
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut latencies = Vec::with_capacity(tick.reads as usize);
        let mut writes = 0;
        let mut drained = false;
        for (_, tag) in events {
            match tag {
                0 => {
                    let (id, v) = self.writes.next();
                    self.db.put(&user_key(id), &v)?;
                    self.history.record(id);
                    writes += 1;
                }
                1 => {
                    let op = self.reads.next(&self.history);
                    let t = Instant::now();
                    read(self.db, op)?;
                    latencies.push(t.elapsed().as_micros() as u64);
                }
                _ => {
                    if !drained {
                        drained = !self.db.aggressive_step()?;
                    }
                }
            }
        }

        let cache = self.db.cache().stats();
        let metrics = self.db.metrics();
        let s = MetricsSample::from_window(
            self.sec,
            1.0,
            &cache.since(&self.cache),
            &metrics.since(&self.metrics),
            writes,
            latencies,
        );
        self.cache = cache;
        self.metrics = metrics;
        self.sec += 1;
        Ok(s)
    }
}

fn read(db: &Db, op: ReadOp) -> Result<(), BenchError> {
    match op {
        ReadOp::Get(id) => {
            db.get(&user_key(id))?;
        }
        ReadOp::Scan { start, len } => {
            let (lo, hi) = (user_key(start), user_key(start + len));
            for r in db.scan(Some(&lo), Some(&hi))? {
                r?;
            }
        }
    }
    Ok(())
}

struct Shared {
    history: Mutex<History>,
    stop: AtomicBool,
    error: Mutex<Option<BenchError>>,
    writes: AtomicU64,
    latencies: Mutex<Vec<u64>>,
}

impl Shared {
    fn fail(&self, e: BenchError) {
        self.error.lock().get_or_insert(e);
        self.stop.store(true, Ordering::SeqCst);
    }
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        thread::sleep(t - now);
    }
}

/// Calls `op` at `qps` against absolute deadlines until told to stop.
/// A late stream catches up rather than skipping operations.
fn paced<F: FnMut() -> Result<(), BenchError>>(shared: &Shared, start: Instant, qps: f64, mut op: F) {
    if qps <= 0.0 {
        return;
    }
    let interval = Duration::from_secs_f64(1.0 / qps);
    let mut n = 0u32;
    while !shared.stop.load(Ordering::SeqCst) {
        sleep_until(start + interval * n);
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        if let Err(e) = op() {
            shared.fail(e);
            break;
        }
        n += 1;
    }
}

fn run_wall<F>(db: &Db, spec: &WorkloadSpec, readers: usize, total: u64, keep: &mut F) -> Result<(), BenchError>
where
    F: FnMut(MetricsSample, u64) -> Result<(), BenchError>,
{
    let shared = Shared {
        history: Mutex::new(History::loaded(spec.records)),
        stop: AtomicBool::new(false),
        error: Mutex::new(None),
        writes: AtomicU64::new(0),
        latencies: Mutex::new(Vec::new()),
    };
    let start = Instant::now();
    thread::scope(|s| {
        let sh = &shared;
        s.spawn(move || {
            let mut w = Writes::new(spec);
            paced(sh, start, spec.write_qps, || {
                let (id, v) = w.next();
                db.put(&user_key(id), &v)?;
                sh.history.lock().record(id);
                sh.writes.fetch_add(1, Ordering::Relaxed);
                Ok(())
            });
        });
        for r in 0..readers {
            s.spawn(move || {
                let mut rs = Reads::new(&WorkloadSpec {
                    seed: spec.seed.wrapping_add(r as u64 * 0x9E37),
                    ..spec.clone()
                });
                paced(sh, start, spec.read_qps / readers as f64, || {
                    let op = rs.next(&sh.history.lock());
                    let t = Instant::now();
                    read(db, op)?;
                    sh.latencies.lock().push(t.elapsed().as_micros() as u64);
                    Ok(())
                });
            });
        }

        let mut cache = db.cache().stats();
        let mut metrics = db.metrics();
        let mut writes = 0;
        let mut last = start;
        for sec in 0..total {
            let tick = start + Duration::from_secs(sec + 1);
            while Instant::now() < tick && !sh.stop.load(Ordering::SeqCst) {
                sleep_until(tick.min(Instant::now() + Duration::from_millis(50)));
            }
            if sh.stop.load(Ordering::SeqCst) {
                break;
            }
            let (c, m, w) = (db.cache().stats(), db.metrics(), sh.writes.load(Ordering::Relaxed));
            let lat = std::mem::take(&mut *sh.latencies.lock());
            let now = Instant::now();
            let sample = MetricsSample::from_window(
                sec,
                (now - last).as_secs_f64(),
                &c.since(&cache),
                &m.since(&metrics),
                w - writes,
                lat,
            );
            (cache, metrics, writes, last) = (c, m, w, now);
            if let Err(e) = keep(sample, sec) {
                sh.fail(e);
                break;
            }
        }
        sh.stop.store(true, Ordering::SeqCst);
    });
    match shared.error.into_inner() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
