//! The merged, versioned index of every host the aggregator knows about.
//!
//! Writers are serialized and publish a new immutable [`IndexSnapshot`] per
//! change; readers load the current snapshot without blocking writers.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use tokio::sync::watch;

use crate::model::{merge, serialize_index, ClusterView, Epoch, HostRecord};
use crate::query::{self, Query};

#[derive(Debug, Clone, Default, PartialEq)]
struct ClusterEntry {
    generated_at: Epoch,
    hosts: BTreeMap<String, Arc<HostRecord>>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClusterSummary {
    pub name: String,
    pub hosts: usize,
}

/// One immutable version of the index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndexSnapshot {
    pub version: u64,
    pub updated_at: Epoch,
    clusters: BTreeMap<String, ClusterEntry>,
}

impl IndexSnapshot {
    pub fn empty() -> Self {
        Self::default()
    }

    /// All hosts in (cluster, host id) order.
    pub fn hosts(&self) -> impl Iterator<Item = &HostRecord> {
        self.clusters
            .values()
            .flat_map(|c| c.hosts.values().map(|h| h.as_ref()))
    }

    pub fn host_count(&self) -> usize {
        self.clusters.values().map(|c| c.hosts.len()).sum()
    }

    pub fn host(&self, host_id: &str) -> Option<&HostRecord> {
        self.clusters
            .values()
            .find_map(|c| c.hosts.get(host_id))
            .map(|h| h.as_ref())
    }

    pub fn clusters(&self) -> Vec<ClusterSummary> {
        self.clusters
            .iter()
            .map(|(name, c)| ClusterSummary {
                name: name.clone(),
                hosts: c.hosts.len(),
            })
            .collect()
    }

    pub fn views(&self) -> Vec<ClusterView> {
        self.clusters
            .iter()
            .map(|(name, c)| ClusterView {
                name: name.clone(),
                generated_at: c.generated_at,
                hosts: c
                    .hosts
                    .iter()
                    .map(|(id, h)| (id.clone(), h.as_ref().clone()))
                    .collect(),
            })
            .collect()
    }

    /// Canonical XML of the whole index.
    pub fn to_xml(&self) -> Vec<u8> {
        serialize_index(&self.views())
    }

    pub fn evaluate(&self, query: &Query, now: Epoch) -> Vec<HostRecord> {
        query::evaluate(self.hosts(), query, now)
    }

    fn cluster_of(&self, host_id: &str) -> Option<&str> {
        self.clusters
            .iter()
            .find(|(_, c)| c.hosts.contains_key(host_id))
            .map(|(n, _)| n.as_str())
    }

    fn put_host(&mut self, incoming: HostRecord) {
        let merged = match self.cluster_of(&incoming.host_id).map(str::to_owned) {
            Some(old_cluster) => {
                let entry = self.clusters.get_mut(&old_cluster).expect("cluster exists");
                let current = entry.hosts.remove(&incoming.host_id).expect("host exists");
                if entry.hosts.is_empty() && old_cluster != incoming.cluster {
                    self.clusters.remove(&old_cluster);
                }
                let mut m = merge(&current, &incoming).expect("same host id");
                m.cluster = incoming.cluster.clone();
                m
            }
            None => incoming,
        };
        self.clusters
            .entry(merged.cluster.clone())
            .or_default()
            .hosts
            .insert(merged.host_id.clone(), Arc::new(merged));
    }

    /// Applies one ingest: every host in `view` is merged with receipt time
    /// `now` as its heartbeat. Always produces a new version.
    pub fn with_ingest(&self, view: &ClusterView, now: Epoch) -> IndexSnapshot {
        let mut next = self.clone();
        for host in view.hosts.values() {
            let mut incoming = host.clone();
            incoming.heartbeat_at = now;
            incoming.cluster = view.name.clone();
            next.put_host(incoming);
        }
        let entry = next.clusters.entry(view.name.clone()).or_default();
        entry.generated_at = entry.generated_at.max(now);
        next.version += 1;
        next.updated_at = next.updated_at.max(now);
        next
    }

    /// Applies previously captured views verbatim: heartbeats and cluster
    /// generation times are taken from the views rather than the clock.
    pub fn with_restore(&self, views: &[ClusterView], now: Epoch) -> IndexSnapshot {
        let mut next = self.clone();
        for view in views {
            for host in view.hosts.values() {
                let mut incoming = host.clone();
                incoming.cluster = view.name.clone();
                next.put_host(incoming);
            }
            let entry = next.clusters.entry(view.name.clone()).or_default();
            entry.generated_at = entry.generated_at.max(view.generated_at);
        }
        next.version += 1;
        next.updated_at = next.updated_at.max(now);
        next
    }

    /// Removes hosts none of whose samples are fresh at `now`. Returns the
    /// new snapshot (unchanged version when nothing was removed) and the
    /// removed host ids in (cluster, host) order.
    pub fn with_sweep(&self, now: Epoch) -> (IndexSnapshot, Vec<String>) {
        let mut removed = Vec::new();
        let mut next = self.clone();
        for entry in next.clusters.values_mut() {
            entry.hosts.retain(|id, h| {
                let keep = h.is_live(now);
                if !keep {
                    removed.push(id.clone());
                }
                keep
            });
        }
        if removed.is_empty() {
            return (self.clone(), removed);
        }
        next.clusters.retain(|_, c| !c.hosts.is_empty());
        next.version += 1;
        next.updated_at = next.updated_at.max(now);
        (next, removed)
    }
}

/// Shared, versioned index with a single logical writer.
pub struct Index {
    current: ArcSwap<IndexSnapshot>,
    writer: Mutex<()>,
    versions: watch::Sender<u64>,
}

impl Default for Index {
    fn default() -> Self {
        Self::new()
    }
}

impl Index {
    pub fn new() -> Self {
        let (versions, _) = watch::channel(0);
        Index {
            current: ArcSwap::from_pointee(IndexSnapshot::empty()),
            writer: Mutex::new(()),
            versions,
        }
    }

    pub fn snapshot(&self) -> Arc<IndexSnapshot> {
        self.current.load_full()
    }

    pub fn version(&self) -> u64 {
        self.current.load().version
    }

    /// Receives the version number after every committed change.
    pub fn watch_versions(&self) -> watch::Receiver<u64> {
        self.versions.subscribe()
    }

    fn commit<T>(&self, f: impl FnOnce(&IndexSnapshot) -> (Option<IndexSnapshot>, T)) -> T {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let cur = self.current.load_full();
        let (next, out) = f(&cur);
        if let Some(next) = next {
            let version = next.version;
            self.current.store(Arc::new(next));
            self.versions.send_replace(version);
        }
        out
    }

    pub fn ingest(&self, view: &ClusterView, now: Epoch) -> u64 {
        self.commit(|cur| {
            let next = cur.with_ingest(view, now);
            let v = next.version;
            (Some(next), v)
        })
    }

    pub fn restore(&self, views: &[ClusterView], now: Epoch) -> u64 {
        self.commit(|cur| {
            let next = cur.with_restore(views, now);
            let v = next.version;
            (Some(next), v)
        })
    }

    pub fn sweep_stale(&self, now: Epoch) -> Vec<String> {
        self.commit(|cur| {
            let (next, removed) = cur.with_sweep(now);
            if removed.is_empty() {
                (None, removed)
            } else {
                (Some(next), removed)
            }
        })
    }
}
