pub mod analysis;
pub mod cache;
pub mod compaction;
pub mod db;
pub mod error;
pub mod fault;
pub mod files;
pub mod format;
pub mod key;
pub mod manifest;
pub mod memtable;
pub mod merge;
pub mod metrics;
pub mod options;
pub mod version;
pub mod wal;

pub use cache::{BlockCache, CacheStats};
pub use compaction::{CompactionJob, JobKind};
pub use db::{Db, DbIter, DbStats, Inspection, ReadStats, Snapshot};
pub use error::{Error, Result};
pub use fault::FaultInjector;
pub use metrics::MetricsSnapshot;
pub use options::{BloomPolicy, Options, Strategy};
pub use version::Version;

pub use analysis::{LsmModelParams, Rational, Scalar};

/// Model parameters evaluated exactly.
pub type ExactModel = LsmModelParams<Rational>;
/// Model parameters evaluated in floating point.
pub type FloatModel = LsmModelParams<f64>;
