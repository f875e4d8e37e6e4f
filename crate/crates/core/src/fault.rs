//! Deterministic I/O fault injection for crash-recovery testing.

use std::sync::atomic::{AtomicI64, Ordering};

use crate::error::{Error, Result};

/// Fails the n-th I/O operation it observes, and every one after it.
#[derive(Debug)]
pub struct FaultInjector {
    budget: i64,
    remaining: AtomicI64,
}

impl Default for FaultInjector {
    fn default() -> Self {
        FaultInjector::disabled()
    }
}

impl FaultInjector {
    pub fn disabled() -> Self {
        FaultInjector {
            budget: i64::MAX,
            remaining: AtomicI64::new(i64::MAX),
        }
    }

    /// Allow `ops` successful operations, then fail.
    pub fn fail_after(ops: u64) -> Self {
        FaultInjector {
            budget: ops as i64,
            remaining: AtomicI64::new(ops as i64),
        }
    }

    pub fn tripped(&self) -> bool {
        self.remaining.load(Ordering::SeqCst) <= 0
    }

    /// Operations seen so far, the failing ones included.
    pub fn observed(&self) -> u64 {
        (self.budget - self.remaining.load(Ordering::SeqCst)).max(0) as u64
    }

    /// Returns `Err` once the budget is exhausted.
    pub fn tick(&self, site: &'static str) -> Result<()> {
        let prev = self.remaining.fetch_sub(1, Ordering::SeqCst);
        if prev <= 0 {
            self.remaining.store(0, Ordering::SeqCst);
            return Err(Error::InjectedFault(site));
        }
        Ok(())
    }
}
