//! Lease-managed source registrations.
//!
//! [`SourceRegistry`] is a plain value driven by an explicit clock so lease
//! arithmetic can be tested without timers. Lease expiry is strict
//! (`lease_expires_at < now`).

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Epoch;

/// Failures after which a source is reported as degraded.
pub const DEGRADED_AFTER: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceKind {
    /// TCP pull from a node agent.
    Pull { address: String },
    /// UDP datagrams whose document names this cluster.
    Push { cluster: String },
    /// External information provider printing one cluster document.
    Exec { command: String },
}

impl SourceKind {
    pub fn is_polled(&self) -> bool {
        !matches!(self, SourceKind::Push { .. })
    }
}

/// What a client submits to register a source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub source_id: String,
    #[serde(flatten)]
    pub kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poll_interval_seconds: Option<u64>,
    pub lifetime_seconds: u64,
}

impl SourceSpec {
    pub fn pull(
        id: impl Into<String>,
        address: impl Into<String>,
        poll: u64,
        lifetime: u64,
    ) -> Self {
        SourceSpec {
            source_id: id.into(),
            kind: SourceKind::Pull {
                address: address.into(),
            },
            poll_interval_seconds: Some(poll),
            lifetime_seconds: lifetime,
        }
    }

    pub fn push(id: impl Into<String>, cluster: impl Into<String>, lifetime: u64) -> Self {
        SourceSpec {
            source_id: id.into(),
            kind: SourceKind::Push {
                cluster: cluster.into(),
            },
            poll_interval_seconds: None,
            lifetime_seconds: lifetime,
        }
    }

    pub fn exec(
        id: impl Into<String>,
        command: impl Into<String>,
        poll: u64,
        lifetime: u64,
    ) -> Self {
        SourceSpec {
            source_id: id.into(),
            kind: SourceKind::Exec {
                command: command.into(),
            },
            poll_interval_seconds: Some(poll),
            lifetime_seconds: lifetime,
        }
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        let invalid = |reason: &str| SourceError::Invalid {
            source_id: self.source_id.clone(),
            reason: reason.to_owned(),
        };
        if self.source_id.is_empty() {
            return Err(invalid("empty source_id"));
        }
        if self.lifetime_seconds == 0 {
            return Err(invalid("lifetime_seconds must be positive"));
        }
        match (self.kind.is_polled(), self.poll_interval_seconds) {
            (true, None) => Err(invalid(
                "poll_interval_seconds required for pull/exec sources",
            )),
            (true, Some(0)) => Err(invalid("poll_interval_seconds must be positive")),
            (true, Some(p)) if p > self.lifetime_seconds => Err(invalid(
                "poll_interval_seconds must not exceed lifetime_seconds",
            )),
            (false, Some(_)) => Err(invalid("push sources are not polled")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SourceRegistration {
    pub source_id: String,
    #[serde(flatten)]
    pub kind: SourceKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poll_interval_seconds: Option<u64>,
    pub lifetime_seconds: u64,
    pub lease_expires_at: Epoch,
    pub consecutive_failures: u32,
    pub degraded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_success_at: Option<Epoch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

impl SourceRegistration {
    pub fn is_expired(&self, now: Epoch) -> bool {
        self.lease_expires_at < now
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SourceError {
    #[error("source {0} is already registered")]
    DuplicateSource(String),
    #[error("unknown source {0}")]
    UnknownSource(String),
    #[error("lease for source {0} has expired; register again")]
    LeaseExpired(String),
    #[error("invalid source {source_id}: {reason}")]
    Invalid { source_id: String, reason: String },
}

#[derive(Debug, Clone, Default)]
pub struct SourceRegistry {
    sources: BTreeMap<String, SourceRegistration>,
}

impl SourceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        spec: SourceSpec,
        now: Epoch,
    ) -> Result<SourceRegistration, SourceError> {
        spec.validate()?;
        if self.sources.contains_key(&spec.source_id) {
            return Err(SourceError::DuplicateSource(spec.source_id));
        }
        let reg = SourceRegistration {
            source_id: spec.source_id.clone(),
            kind: spec.kind,
            poll_interval_seconds: spec.poll_interval_seconds,
            lifetime_seconds: spec.lifetime_seconds,
            lease_expires_at: now + spec.lifetime_seconds,
            consecutive_failures: 0,
            degraded: false,
            last_success_at: None,
            last_error: None,
        };
        self.sources.insert(spec.source_id, reg.clone());
        Ok(reg)
    }

    /// Extends the lease to `now + lifetime`. An expired source is dropped
    /// and must register again.
    pub fn renew(
        &mut self,
        source_id: &str,
        now: Epoch,
    ) -> Result<SourceRegistration, SourceError> {
        let reg = self
            .sources
            .get_mut(source_id)
            .ok_or_else(|| SourceError::UnknownSource(source_id.to_owned()))?;
        if reg.is_expired(now) {
            self.sources.remove(source_id);
            return Err(SourceError::LeaseExpired(source_id.to_owned()));
        }
        reg.lease_expires_at = now + reg.lifetime_seconds;
        Ok(reg.clone())
    }

    pub fn deregister(&mut self, source_id: &str) -> Result<SourceRegistration, SourceError> {
        self.sources
            .remove(source_id)
            .ok_or_else(|| SourceError::UnknownSource(source_id.to_owned()))
    }

    /// Removes every source whose lease ended before `now`.
    pub fn expire(&mut self, now: Epoch) -> Vec<String> {
        let expired: Vec<String> = self
            .sources
            .values()
            .filter(|r| r.is_expired(now))
            .map(|r| r.source_id.clone())
            .collect();
        for id in &expired {
            self.sources.remove(id);
        }
        expired
    }

    pub fn get(&self, source_id: &str) -> Option<&SourceRegistration> {
        self.sources.get(source_id)
    }

    pub fn is_live(&self, source_id: &str, now: Epoch) -> bool {
        self.sources
            .get(source_id)
            .is_some_and(|r| !r.is_expired(now))
    }

    pub fn list(&self) -> Vec<SourceRegistration> {
        self.sources.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// The live push source accepting documents for `cluster`, if any.
    pub fn push_source_for(&self, cluster: &str, now: Epoch) -> Option<&SourceRegistration> {
        self.sources.values().find(|r| {
            !r.is_expired(now) && matches!(&r.kind, SourceKind::Push { cluster: c } if c == cluster)
        })
    }

    pub fn record_success(&mut self, source_id: &str, now: Epoch) {
        if let Some(r) = self.sources.get_mut(source_id) {
            r.consecutive_failures = 0;
            r.degraded = false;
            r.last_success_at = Some(now);
            r.last_error = None;
        }
    }

    pub fn record_failure(&mut self, source_id: &str, error: impl Into<String>) {
        if let Some(r) = self.sources.get_mut(source_id) {
            r.consecutive_failures += 1;
            r.degraded = r.consecutive_failures >= DEGRADED_AFTER;
            r.last_error = Some(error.into());
        }
    }
}

/// Deterministic delay before a source's first poll: a hash-of-id fraction of
/// its interval.
pub fn first_poll_delay(source_id: &str, interval: Duration) -> Duration {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in source_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    interval.mul_f64((h % 1000) as f64 / 1000.0)
}
