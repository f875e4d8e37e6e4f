//! Workload generation and a metrics-sampling benchmark driver for `dlsm`.

use std::io;

use thiserror::Error;

pub mod runner;
pub mod workload;

pub use runner::{
    load, run_benchmark, Clock, Driver, MetricsSample, RunOptions, SampleWriter, Summary, Tick, CSV_HEADER,
};
pub use workload::{next_read_key, user_key, value_for, History, ReadOp, Reads, WorkloadKind, WorkloadSpec, Writes};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{0}")]
    Usage(String),

    #[error("key {0:?} not found")]
    NotFound(String),

    #[error(transparent)]
    Engine(#[from] dlsm::Error),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl BenchError {
    /// Short machine-readable class of the error.
    pub fn kind(&self) -> &'static str {
        match self {
            BenchError::Usage(_) => "usage",
            BenchError::NotFound(_) => "not-found",
            BenchError::Engine(_) => "engine",
            BenchError::Io(_) => "io",
            BenchError::Csv(_) => "io",
        }
    }
}
