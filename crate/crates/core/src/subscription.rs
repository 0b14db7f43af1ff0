//! Change notification by diffing a subscription's match set between index
//! versions. Delivery is at-least-once; a cycle's events all carry the
//! version they were computed against.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use thiserror::Error;

use crate::index::IndexSnapshot;
use crate::model::{Epoch, HostRecord};
use crate::query::Query;

pub const DEFAULT_SUBSCRIPTION_LIFETIME: u64 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    HostAdded,
    HostRemoved,
    MetricsUpdated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChangeEvent {
    pub kind: ChangeKind,
    pub host_id: String,
    pub cluster: String,
    pub version: u64,
    pub matched: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown subscription {0}")]
pub struct UnknownSubscription(pub String);

/// host id -> the host's matched, projected record
pub type MatchSet = BTreeMap<String, HostRecord>;

pub fn match_set(snapshot: &IndexSnapshot, query: &Query, now: Epoch) -> MatchSet {
    snapshot
        .evaluate(query, now)
        .into_iter()
        .map(|h| (h.host_id.clone(), h))
        .collect()
}

/// Events turning `before` into `after`, ordered by (cluster, host id).
pub fn diff(before: &MatchSet, after: &MatchSet, version: u64) -> Vec<ChangeEvent> {
    let mut events = Vec::new();
    let event = |kind, h: &HostRecord, matched| ChangeEvent {
        kind,
        host_id: h.host_id.clone(),
        cluster: h.cluster.clone(),
        version,
        matched,
    };
    for (id, old) in before {
        match after.get(id) {
            None => events.push(event(ChangeKind::HostRemoved, old, false)),
            Some(new) if new.samples != old.samples || new.cluster != old.cluster => {
                events.push(event(ChangeKind::MetricsUpdated, new, true))
            }
            Some(_) => {}
        }
    }
    for (id, new) in after {
        if !before.contains_key(id) {
            events.push(event(ChangeKind::HostAdded, new, true));
        }
    }
    events.sort_by(|a, b| (&a.cluster, &a.host_id).cmp(&(&b.cluster, &b.host_id)));
    events
}

#[derive(Debug, Clone)]
pub struct Subscription {
    pub id: String,
    pub query: Query,
    pub created_at: Epoch,
    pub last_version_delivered: u64,
    last_active: Epoch,
    matched: MatchSet,
}

impl Subscription {
    /// Baselines the subscription on `snapshot`: only later changes notify.
    pub fn new(id: String, query: Query, snapshot: &IndexSnapshot, now: Epoch) -> Self {
        Subscription {
            matched: match_set(snapshot, &query, now),
            id,
            query,
            created_at: now,
            last_version_delivered: snapshot.version,
            last_active: now,
        }
    }

    pub fn poll(&mut self, snapshot: &IndexSnapshot, now: Epoch) -> Vec<ChangeEvent> {
        self.last_active = now;
        if snapshot.version <= self.last_version_delivered {
            return Vec::new();
        }
        let current = match_set(snapshot, &self.query, now);
        let events = diff(&self.matched, &current, snapshot.version);
        self.matched = current;
        self.last_version_delivered = snapshot.version;
        events
    }
}

pub struct SubscriptionStore {
    subs: Mutex<HashMap<String, Subscription>>,
    lifetime: u64,
    next_id: AtomicU64,
}

impl Default for SubscriptionStore {
    fn default() -> Self {
        Self::new(DEFAULT_SUBSCRIPTION_LIFETIME)
    }
}

impl SubscriptionStore {
    pub fn new(lifetime_seconds: u64) -> Self {
        SubscriptionStore {
            subs: Mutex::new(HashMap::new()),
            lifetime: lifetime_seconds,
            next_id: AtomicU64::new(1),
        }
    }

    pub fn subscribe(&self, query: Query, snapshot: &IndexSnapshot, now: Epoch) -> String {
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let id = format!("sub-{now:x}-{n}");
        let sub = Subscription::new(id.clone(), query, snapshot, now);
        let mut subs = self.subs.lock().unwrap_or_else(|e| e.into_inner());
        Self::gc_locked(&mut subs, self.lifetime, now);
        subs.insert(id.clone(), sub);
        id
    }

    pub fn poll(
        &self,
        id: &str,
        snapshot: &IndexSnapshot,
        now: Epoch,
    ) -> Result<Vec<ChangeEvent>, UnknownSubscription> {
        let mut subs = self.subs.lock().unwrap_or_else(|e| e.into_inner());
        Self::gc_locked(&mut subs, self.lifetime, now);
        subs.get_mut(id)
            .map(|s| s.poll(snapshot, now))
            .ok_or_else(|| UnknownSubscription(id.to_owned()))
    }

    /// Drops subscriptions idle for longer than the lifetime.
    pub fn gc(&self, now: Epoch) -> usize {
        let mut subs = self.subs.lock().unwrap_or_else(|e| e.into_inner());
        Self::gc_locked(&mut subs, self.lifetime, now)
    }

    fn gc_locked(subs: &mut HashMap<String, Subscription>, lifetime: u64, now: Epoch) -> usize {
        let before = subs.len();
        subs.retain(|_, s| now.saturating_sub(s.last_active) <= lifetime);
        before - subs.len()
    }

    pub fn len(&self) -> usize {
        self.subs.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
