//! Engine configuration and its `key=value` file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fault::FaultInjector;
use crate::format::bloom_bits_per_key;

pub const OPTIONS_FILE: &str = "OPTIONS";

const MB: u64 = 1 << 20;

/// How levels 1..k-1 are organized and compacted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Two-phase compaction plus the on-disk compaction buffer.
    Dlsm,
    /// Two-phase compaction only; reads go through the LSM levels.
    Lsm,
    /// Stepped merge: up to r unmerged runs per level.
    SteppedMerge,
    /// Classic leveling with round-robin chunk selection.
    Leveled,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Dlsm => "dlsm",
            Strategy::Lsm => "lsm",
            Strategy::SteppedMerge => "sm",
            Strategy::Leveled => "leveled",
        }
    }

    pub fn is_two_phase(self) -> bool {
        matches!(self, Strategy::Dlsm | Strategy::Lsm)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dlsm" => Ok(Strategy::Dlsm),
            "lsm" => Ok(Strategy::Lsm),
            "sm" => Ok(Strategy::SteppedMerge),
            "leveled" => Ok(Strategy::Leveled),
            _ => Err(Error::InvalidArgument(format!("unknown strategy {s:?}"))),
        }
    }
}

/// Bits per key for table Bloom filters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BloomPolicy {
    /// Same budget for every table.
    Flat(u32),
    /// Target false-positive rate for a whole point lookup. Tables that may
    /// be searched alongside r - 1 others get proportionally more bits.
    Sized { fpr: f64 },
}

#[derive(Debug, Clone)]
pub struct Options {
    pub strategy: Strategy,
    /// r, the capacity ratio between adjacent levels.
    pub size_ratio: u32,
    /// k, the number of on-disk levels. Level k is the last one.
    pub levels: u32,
    /// S0: memtable capacity in bytes. Level i holds S0 * r^i.
    pub level0_capacity: u64,
    pub table_size: u64,
    pub block_size: usize,
    pub bloom: BloomPolicy,
    /// Headroom over S_i a level may reach before it must be drained.
    pub slack: f64,
    pub cache_capacity: u64,
    pub sync_wal: bool,
    /// Run flushes and compactions on a worker thread.
    pub background: bool,
    /// After routine maintenance, keep draining levels 1..k-1 into level k.
    pub aggressive: bool,
    /// Cross-check every buffered point read against the LSM read path.
    pub verify_buffer_reads: bool,
    pub create_if_missing: bool,
    /// Rewrite the manifest once it grows past this many bytes.
    pub manifest_rewrite_bytes: u64,
    pub faults: Arc<FaultInjector>,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            strategy: Strategy::Dlsm,
            size_ratio: 4,
            levels: 3,
            level0_capacity: 16 * MB,
            table_size: 2 * MB,
            block_size: 4096,
            bloom: BloomPolicy::Flat(15),
            slack: 0.1,
            cache_capacity: 64 * MB,
            sync_wal: false,
            background: false,
            aggressive: false,
            verify_buffer_reads: false,
            create_if_missing: true,
            manifest_rewrite_bytes: 32 * MB,
            faults: Arc::new(FaultInjector::disabled()),
        }
    }
}

impl Options {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.size_ratio < 2 {
            return bad("size_ratio must be at least 2");
        }
        if self.levels < 2 {
            return bad("levels must be at least 2");
        }
        if self.level0_capacity == 0 || self.table_size == 0 || self.block_size == 0 {
            return bad("capacities must be positive");
        }
        if !(self.slack >= 0.0 && self.slack.is_finite()) {
            return bad("slack must be a non-negative number");
        }
        if let BloomPolicy::Sized { fpr } = self.bloom {
            bloom_bits_per_key(fpr, 1)?;
        }
        Ok(())
    }

    /// S_i = S0 * r^i. Level k has no cap.
    pub fn level_capacity(&self, level: u32) -> u64 {
        self.level0_capacity
            .saturating_mul((self.size_ratio as u64).saturating_pow(level))
    }

    /// The size a level may not exceed after any published change.
    pub fn hard_capacity(&self, level: u32) -> u64 {
        (self.level_capacity(level) as f64 * (1.0 + self.slack)) as u64
    }

    /// Bits per key for a table written to `level`.
    pub fn bloom_bits(&self, level: u32) -> u32 {
        match self.bloom {
            BloomPolicy::Flat(b) => b,
            BloomPolicy::Sized { fpr } => {
                let overlap = if level < self.levels && self.strategy != Strategy::Leveled {
                    self.size_ratio
                } else {
                    1
                };
                bloom_bits_per_key(fpr, overlap).unwrap_or(15)
            }
        }
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("{key}: not a number: {v:?}")))
        };
        let int = |v: &str| -> Result<u64> {
            v.parse::<u64>()
                .map_err(|_| Error::InvalidArgument(format!("{key}: not an integer: {v:?}")))
        };
        let flag = |v: &str| -> Result<bool> {
            match v {
                "on" | "true" | "1" => Ok(true),
                "off" | "false" | "0" => Ok(false),
                _ => Err(Error::InvalidArgument(format!("{key}: expected on|off, got {v:?}"))),
            }
        };
        match key.trim() {
            "strategy" => self.strategy = v.parse()?,
            "size_ratio" => self.size_ratio = int(v)? as u32,
            "levels" => self.levels = int(v)? as u32,
            "level0_capacity_mb" => self.level0_capacity = (num(v)? * MB as f64) as u64,
            "table_mb" => self.table_size = (num(v)? * MB as f64) as u64,
            "block_size" => self.block_size = int(v)? as usize,
            "slack" => self.slack = num(v)?,
            "cache_mb" => self.cache_capacity = (num(v)? * MB as f64) as u64,
            "bloom_bits" => self.bloom = BloomPolicy::Flat(int(v)? as u32),
            "bloom_fpr" => self.bloom = BloomPolicy::Sized { fpr: num(v)? },
            "sync_wal" => self.sync_wal = flag(v)?,
            "background" => self.background = flag(v)?,
            "aggressive" => self.aggressive = flag(v)?,
            "verify_reads" => self.verify_buffer_reads = flag(v)?,
            other => return Err(Error::InvalidArgument(format!("unknown option {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse_config(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_config(&self) -> String {
        let mb = |b: u64| b as f64 / MB as f64;
        let mut s = String::new();
        s += &format!("strategy={}\n", self.strategy);
        s += &format!("size_ratio={}\n", self.size_ratio);
        s += &format!("levels={}\n", self.levels);
        s += &format!("level0_capacity_mb={}\n", mb(self.level0_capacity));
        s += &format!("table_mb={}\n", mb(self.table_size));
        s += &format!("block_size={}\n", self.block_size);
        s += &format!("slack={}\n", self.slack);
        s += &format!("cache_mb={}\n", mb(self.cache_capacity));
        match self.bloom {
            BloomPolicy::Flat(b) => s += &format!("bloom_bits={b}\n"),
            BloomPolicy::Sized { fpr } => s += &format!("bloom_fpr={fpr}\n"),
        }
        let onoff = |b: bool| if b { "on" } else { "off" };
        s += &format!("sync_wal={}\n", onoff(self.sync_wal));
        s += &format!("aggressive={}\n", onoff(self.aggressive));
        s
    }

    pub fn load(dir: &Path) -> Result<Option<Options>> {
        match std::fs::read_to_string(dir.join(OPTIONS_FILE)) {
            Ok(text) => {
                let mut o = Options::default();
                o.parse_config(&text)?;
                Ok(Some(o))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join("OPTIONS.tmp");
        std::fs::write(&tmp, self.to_config())?;
        std::fs::rename(tmp, dir.join(OPTIONS_FILE))?;
        Ok(())
    }

    /// Whether `other` describes the same on-disk layout.
    pub fn same_layout(&self, other: &Options) -> bool {
        self.strategy == other.strategy
            && self.size_ratio == other.size_ratio
            && self.levels == other.levels
            && self.level0_capacity == other.level0_capacity
    }
}
