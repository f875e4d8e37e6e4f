//! Deterministic YCSB-style key and value generation.
//!
//! Records are numbered `0..records` and loaded in that order, so record
//! ids double as insertion time for a freshly loaded database. Every write
//! is an update of an existing record; the "latest" distributions pick
//! among recently written records using a recency log of ids.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadKind {
    LatestUniform,
    LatestZipfian,
    LatestRangeHot,
    RangeScan,
    /// Uniform over the whole key space, no recency bias.
    Uniform,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 5] = [
        WorkloadKind::LatestUniform,
        WorkloadKind::LatestZipfian,
        WorkloadKind::LatestRangeHot,
        WorkloadKind::RangeScan,
        WorkloadKind::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::LatestUniform => "latest-uniform",
            WorkloadKind::LatestZipfian => "latest-zipfian",
            WorkloadKind::LatestRangeHot => "latest-rangehot",
            WorkloadKind::RangeScan => "range-scan",
            WorkloadKind::Uniform => "uniform",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WorkloadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| BenchError::Usage(format!("unknown workload {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub read_qps: f64,
    pub write_qps: f64,
    /// Key plus value.
    pub kv_bytes: usize,
    pub zipf_theta: f64,
    pub hot_range_fraction: f64,
    /// Bytes covered by one range query.
    pub scan_bytes: u64,
    pub duration_sec: u64,
    pub seed: u64,
    /// Number of loaded records.
    pub records: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            kind: WorkloadKind::LatestZipfian,
            read_qps: 1_000.0,
            write_qps: 500.0,
            kv_bytes: 1024,
            zipf_theta: 0.99,
            hot_range_fraction: 0.10,
            scan_bytes: 10 << 20,
            duration_sec: 60,
            seed: 1,
            records: 1 << 20,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Usage(m));
        if !(self.read_qps >= 0.0 && self.read_qps.is_finite()) {
            return bad(format!("read_qps must be a finite rate >= 0, got {}", self.read_qps));
        }
        if !(self.write_qps >= 0.0 && self.write_qps.is_finite()) {
            return bad(format!("write_qps must be a finite rate >= 0, got {}", self.write_qps));
        }
        if !(self.hot_range_fraction > 0.0 && self.hot_range_fraction <= 1.0) {
            return bad(format!("hot_range_fraction must lie in (0, 1], got {}", self.hot_range_fraction));
        }
        if !(self.zipf_theta > 0.0 && self.zipf_theta.is_finite()) {
            return bad(format!("zipf_theta must be positive, got {}", self.zipf_theta));
        }
        if self.kv_bytes < KEY_LEN + 16 {
            return bad(format!("kv_bytes must be at least {}", KEY_LEN + 16));
        }
        if self.records == 0 {
            return bad("records must be positive".into());
        }
        Ok(())
    }

    /// Records returned by one range query.
    pub fn scan_len(&self) -> u64 {
        (self.scan_bytes / self.kv_bytes as u64).clamp(1, self.records)
    }

    fn hot_count(&self, of: u64) -> u64 {
        ((self.hot_range_fraction * of as f64).ceil() as u64).clamp(1, of)
    }
}

pub const KEY_LEN: usize = 16;

/// Zero padded so that key order is id order.
pub fn user_key(id: u64) -> Vec<u8> {
    format!("user{id:012}").into_bytes()
}

pub fn parse_user_key(key: &[u8]) -> Option<u64> {
    std::str::from_utf8(key.strip_prefix(b"user")?).ok()?.parse().ok()
}

/// A value of `kv_bytes - KEY_LEN` bytes that names its record and
/// version, padded with filler derived from both.
pub fn value_for(id: u64, version: u64, kv_bytes: usize) -> Vec<u8> {
    let mut v = format!("{id}:{version}:").into_bytes();
    let len = kv_bytes.saturating_sub(KEY_LEN).max(v.len());
    let mut x = id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ version;
    while v.len() < len {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        v.push(b'a' + (x % 26) as u8);
    }
    v
}

/// Ids in write order, oldest first. Seeded with the load order.
#[derive(Debug, Clone)]
pub struct History {
    log: Vec<u64>,
}

impl History {
    pub fn loaded(records: u64) -> Self {
        History {
            log: (0..records).collect(),
        }
    }

    pub fn record(&mut self, id: u64) {
        self.log.push(id);
    }

    /// Number of writes seen, loads included.
    pub fn frontier(&self) -> u64 {
        self.log.len() as u64
    }

    /// The record written `rank` writes ago; rank 1 is the latest.
    pub fn recent(&self, rank: u64) -> u64 {
        self.log[self.log.len() - rank as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadOp {
    Get(u64),
    /// `len` consecutive records starting at `start`.
    Scan { start: u64, len: u64 },
}

/// Picks the record for a point read. `history` must not be empty.
pub fn next_read_key<R: Rng>(spec: &WorkloadSpec, history: &History, rng: &mut R) -> u64 {
    let frontier = history.frontier();
    debug_assert!(frontier > 0);
    // the latest distributions draw from the newest tenth (by default) of
    // the writes
    let window = spec.hot_count(spec.records).min(frontier);
    match spec.kind {
        WorkloadKind::LatestZipfian => history.recent(zipf_rank(window, spec.zipf_theta, rng)),
        WorkloadKind::LatestUniform => history.recent(rng.gen_range(1..=window)),
        WorkloadKind::LatestRangeHot => {
            let hot = spec.hot_count(spec.records);
            rng.gen_range(spec.records - hot..spec.records)
        }
        WorkloadKind::RangeScan | WorkloadKind::Uniform => rng.gen_range(0..spec.records),
    }
}

/// A Zipf-distributed rank in `1..=n`.
pub fn zipf_rank<R: Rng>(n: u64, theta: f64, rng: &mut R) -> u64 {
    let z = Zipf::new(n, theta).expect("n >= 1 and theta > 0");
    (z.sample(rng) as u64).clamp(1, n)
}

/// The read stream of a workload.
#[derive(Debug, Clone)]
pub struct Reads {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
}

impl Reads {
    pub fn new(spec: &WorkloadSpec) -> Self {
        Reads {
            spec: spec.clone(),
            rng: ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0000_0000_0001),
        }
    }

    pub fn next(&mut self, history: &History) -> ReadOp {
        if self.spec.kind == WorkloadKind::RangeScan {
            let len = self.spec.scan_len();
            let start = self.rng.gen_range(0..=self.spec.records - len);
            return ReadOp::Scan { start, len };
        }
        ReadOp::Get(next_read_key(&self.spec, history, &mut self.rng))
    }
}

/// The write stream: updates of uniformly chosen records.
#[derive(Debug, Clone)]
pub struct Writes {
    records: u64,
    kv_bytes: usize,
    rng: ChaCha8Rng,
    issued: u64,
}

impl Writes {
    pub fn new(spec: &WorkloadSpec) -> Self {
        Writes {
            records: spec.records,
            kv_bytes: spec.kv_bytes,
            rng: ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0000_0000_0002),
            issued: 0,
        }
    }

    /// The next record to update and its new value.
    pub fn next(&mut self) -> (u64, Vec<u8>) {
        let id = self.rng.gen_range(0..self.records);
        self.issued += 1;
        (id, value_for(id, self.issued, self.kv_bytes))
    }
}
