pub mod agent;
pub mod aggregator;
pub mod cli;
pub mod daemon;
pub mod http;
pub mod index;
pub mod model;
pub mod persistence;
pub mod query;
pub mod render;
pub mod sources;
pub mod subscription;
pub mod trigger;

use std::sync::atomic::{AtomicU64, Ordering};

/// Current wall-clock time in whole seconds since the Unix epoch.
pub fn now_secs() -> model::Epoch {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Source of "now" for request handling and background loops.
pub trait Clock: Send + Sync {
    fn now(&self) -> model::Epoch;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> model::Epoch {
        now_secs()
    }
}

/// Manually driven clock.
#[derive(Debug, Default)]
pub struct FixedClock(AtomicU64);

impl FixedClock {
    pub fn new(t: model::Epoch) -> Self {
        FixedClock(AtomicU64::new(t))
    }

    pub fn set(&self, t: model::Epoch) {
        self.0.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, secs: u64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for FixedClock {
    fn now(&self) -> model::Epoch {
        self.0.load(Ordering::SeqCst)
    }
}
