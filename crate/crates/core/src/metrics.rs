//! Engine counters. Everything is cumulative; callers diff snapshots.

use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

macro_rules! counters {
    ($($(#[$m:meta])* $name:ident),* $(,)?) => {
        #[derive(Debug, Default)]
        pub(crate) struct Atomics {
            $(pub(crate) $name: AtomicU64,)*
        }

        /// A point-in-time copy of the engine counters.
        #[derive(Debug, Clone, Default, PartialEq)]
        pub struct MetricsSnapshot {
            $($(#[$m])* pub $name: u64,)*
            /// Indexed by target level (index 0 unused).
            pub levels: Vec<LevelCounters>,
        }

        impl Metrics {
            pub fn snapshot(&self) -> MetricsSnapshot {
                MetricsSnapshot {
                    $($name: self.c.$name.load(Ordering::Relaxed),)*
                    levels: self.levels.lock().clone(),
                }
            }
        }

        impl MetricsSnapshot {
            pub fn since(&self, earlier: &MetricsSnapshot) -> MetricsSnapshot {
                let levels = self
                    .levels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| l.since(earlier.levels.get(i).copied().unwrap_or_default()))
                    .collect();
                MetricsSnapshot {
                    $($name: self.$name - earlier.$name,)*
                    levels,
                }
            }
        }
    };
}

counters! {
    writes,
    flushes,
    /// Logical bytes of memtables flushed.
    flush_bytes,
    /// Bytes written into level 1 tables by flushes.
    flush_table_bytes,
    /// Bytes written for memtable dumps into buffer level 1.
    buffer_dump_bytes,
    /// Bytes written for buffer levels 2..k-1. The buffer only re-links
    /// existing tables there, so this stays zero.
    buffer_upper_bytes,
    /// Tables installed somewhere without being rewritten.
    relinked_tables,
    relinked_bytes,
    compaction_jobs,
    compaction_bytes_read,
    compaction_bytes_written,
    rotations,
    gets,
    /// Tables whose key range covered a lookup key.
    get_candidates,
    /// Candidates that passed the Bloom filter.
    get_bloom_passes,
    /// Data blocks fetched by point reads (cache hits included).
    get_block_fetches,
    buffer_verify_mismatches,
    scans,
    scan_tables,
    write_stalls,
}

/// Per-level compaction counters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LevelCounters {
    pub jobs: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    /// Target tables merged, summed over chunk steps.
    pub fanin_tables: u64,
    pub chunk_bytes: u64,
    /// Target bytes merged, summed over chunk steps.
    pub overlap_bytes: u64,
    pub chunk_steps: u64,
}

impl LevelCounters {
    fn since(&self, e: LevelCounters) -> LevelCounters {
        LevelCounters {
            jobs: self.jobs - e.jobs,
            bytes_read: self.bytes_read - e.bytes_read,
            bytes_written: self.bytes_written - e.bytes_written,
            fanin_tables: self.fanin_tables - e.fanin_tables,
            chunk_bytes: self.chunk_bytes - e.chunk_bytes,
            overlap_bytes: self.overlap_bytes - e.overlap_bytes,
            chunk_steps: self.chunk_steps - e.chunk_steps,
        }
    }

    /// Mean target tables merged per chunk step.
    pub fn fan_in(&self) -> Option<f64> {
        (self.chunk_steps > 0).then(|| self.fanin_tables as f64 / self.chunk_steps as f64)
    }

    /// Target bytes merged per chunk byte.
    pub fn overlap_ratio(&self) -> Option<f64> {
        (self.chunk_bytes > 0).then(|| self.overlap_bytes as f64 / self.chunk_bytes as f64)
    }
}

impl MetricsSnapshot {
    /// Fan-in aggregated over target levels `from..`.
    pub fn fan_in_from(&self, from: usize) -> Option<f64> {
        let (t, n) = self
            .levels
            .iter()
            .skip(from)
            .fold((0, 0), |(t, n), l| (t + l.fanin_tables, n + l.chunk_steps));
        (n > 0).then(|| t as f64 / n as f64)
    }

    pub fn candidates_per_get(&self) -> Option<f64> {
        (self.gets > 0).then(|| self.get_candidates as f64 / self.gets as f64)
    }
}

#[derive(Debug, Default)]
pub struct Metrics {
    pub(crate) c: Atomics,
    levels: Mutex<Vec<LevelCounters>>,
}

impl Metrics {
    pub fn new(levels: u32) -> Self {
        Metrics {
            c: Atomics::default(),
            levels: Mutex::new(vec![LevelCounters::default(); levels as usize + 1]),
        }
    }

    pub(crate) fn level(&self, level: u32, f: impl FnOnce(&mut LevelCounters)) {
        let mut l = self.levels.lock();
        if let Some(c) = l.get_mut(level as usize) {
            f(c);
        }
    }
}

pub(crate) fn add(counter: &AtomicU64, n: u64) {
    counter.fetch_add(n, Ordering::Relaxed);
}
