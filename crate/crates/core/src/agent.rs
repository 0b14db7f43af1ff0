//! The per-host monitor: collects static and dynamic metrics, serves the
//! latest snapshot over TCP, and optionally announces it over UDP.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use arc_swap::ArcSwapOption;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::AsyncWriteExt;
use tokio::net::{TcpListener, UdpSocket};
use tokio::task::JoinHandle;
use tracing::{debug, error, info, warn};

use crate::model::{
    canonical_serialize, merge, ClusterView, Epoch, HostRecord, MetricKind, MetricSample, Value,
    ValueType,
};
use crate::now_secs;

/// Largest document sent as a single announce datagram.
pub const MAX_ANNOUNCE_BYTES: usize = 8192;

pub const AGENT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("invalid fixture {path}: {reason}")]
    InvalidFixture { path: PathBuf, reason: String },
    #[error("no snapshot yet: the first collection has not completed")]
    NotReady,
    #[error("document is {0} bytes, over the {MAX_ANNOUNCE_BYTES}-byte announce limit")]
    DocumentTooLarge(usize),
    #[error("announce failed: {0}")]
    Network(#[source] std::io::Error),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollectorBackend {
    System,
    Fixture(PathBuf),
}

fn default_listen_address() -> String {
    "0.0.0.0".to_owned()
}

/// Agent configuration file (JSON).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    /// Overrides the OS hostname.
    #[serde(default)]
    pub host_id: Option<String>,
    pub cluster: String,
    pub collect_interval_seconds: u64,
    /// `host:port` of the aggregator's push listener.
    #[serde(default)]
    pub announce_target: Option<String>,
    #[serde(default = "default_listen_address")]
    pub listen_address: String,
    pub listen_port: u16,
    pub static_ttl_seconds: u64,
    pub dynamic_ttl_seconds: u64,
    pub collector_backend: CollectorBackend,
}

impl AgentConfig {
    pub fn from_json(text: &str) -> Result<Self, AgentError> {
        let config: AgentConfig =
            serde_json::from_str(text).map_err(|e| AgentError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AgentError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let mut config: AgentConfig = serde_json::from_str(&text)
            .map_err(|e| AgentError::InvalidConfig(format!("{}: {e}", path.display())))?;
        if let (CollectorBackend::Fixture(p), Some(base)) =
            (&mut config.collector_backend, path.parent())
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_owned()));
        if self.cluster.is_empty() {
            return bad("cluster must not be empty");
        }
        if self.collect_interval_seconds == 0 {
            return bad("collect_interval_seconds must be positive");
        }
        if self.static_ttl_seconds == 0 || self.dynamic_ttl_seconds == 0 {
            return bad("ttl values must be positive");
        }
        if let Some(h) = &self.host_id {
            if h.is_empty() {
                return bad("host_id must not be empty");
            }
        }
        if let CollectorBackend::Fixture(p) = &self.collector_backend {
            if !p.exists() {
                return Err(AgentError::InvalidConfig(format!(
                    "fixture {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn ttls(&self) -> Ttls {
        Ttls {
            static_seconds: self.static_ttl_seconds,
            dynamic_seconds: self.dynamic_ttl_seconds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ttls {
    pub static_seconds: u64,
    pub dynamic_seconds: u64,
}

impl Ttls {
    fn for_kind(self, kind: MetricKind) -> u64 {
        match kind {
            MetricKind::Static => self.static_seconds,
            MetricKind::Dynamic => self.dynamic_seconds,
        }
    }
}

// ---------------------------------------------------------------------------
// Fixtures

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStatic {
    name: String,
    #[serde(rename = "type")]
    ty: ValueType,
    value: serde_json::Value,
    #[serde(default)]
    units: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDynamic {
    name: String,
    #[serde(rename = "type")]
    ty: ValueType,
    sequence: Vec<serde_json::Value>,
    #[serde(default)]
    units: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFixture {
    #[serde(default, rename = "static")]
    statics: Vec<RawStatic>,
    #[serde(default)]
    dynamic: Vec<RawDynamic>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureMetric {
    pub name: String,
    pub kind: MetricKind,
    pub units: String,
    /// One value for static metrics; the replay sequence for dynamic ones.
    pub values: Vec<Value>,
}

/// Metric set replayed by the fixture backend. Dynamic metrics advance one
/// sequence element per collection and hold their last value once exhausted.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureDocument {
    pub metrics: Vec<FixtureMetric>,
}

impl FixtureDocument {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let raw: RawFixture = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut metrics = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        let convert = |name: &str, ty: ValueType, v: &serde_json::Value| {
            Value::from_json(ty, v)
                .ok_or_else(|| format!("metric {name}: {v} is not a valid {}", ty.as_str()))
        };
        for s in &raw.statics {
            metrics.push(FixtureMetric {
                name: s.name.clone(),
                kind: MetricKind::Static,
                units: s.units.clone(),
                values: vec![convert(&s.name, s.ty, &s.value)?],
            });
        }
        for d in &raw.dynamic {
            if d.sequence.is_empty() {
                return Err(format!("metric {}: empty sequence", d.name));
            }
            let values = d
                .sequence
                .iter()
                .map(|v| convert(&d.name, d.ty, v))
                .collect::<Result<Vec<_>, _>>()?;
            metrics.push(FixtureMetric {
                name: d.name.clone(),
                kind: MetricKind::Dynamic,
                units: d.units.clone(),
                values,
            });
        }
        for m in &metrics {
            if !crate::model::is_valid_metric_name(&m.name) {
                return Err(format!("invalid metric name {:?}", m.name));
            }
            if !seen.insert(m.name.clone()) {
                return Err(format!("duplicate metric {}", m.name));
            }
        }
        Ok(FixtureDocument { metrics })
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let invalid = |reason: String| AgentError::InvalidFixture {
            path: path.to_owned(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| invalid(e.to_string()))?;
        Self::from_json(&text).map_err(invalid)
    }
}

// ---------------------------------------------------------------------------
// Collectors

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectorUnavailable {
    pub metric: String,
    pub reason: String,
}

/// Result of one collection: whatever could be read plus what could not.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Collected {
    pub samples: Vec<MetricSample>,
    pub unavailable: Vec<CollectorUnavailable>,
}

impl Collected {
    fn push(
        &mut self,
        name: &str,
        value: Value,
        units: &str,
        kind: MetricKind,
        now: Epoch,
        ttls: Ttls,
    ) {
        match MetricSample::new(name, value, units, kind, now, ttls.for_kind(kind)) {
            Ok(s) => self.samples.push(s),
            Err(e) => self.missing(name, e.to_string()),
        }
    }

    fn missing(&mut self, name: &str, reason: impl Into<String>) {
        self.unavailable.push(CollectorUnavailable {
            metric: name.to_owned(),
            reason: reason.into(),
        });
    }
}

pub trait Collector: Send {
    fn collect(&mut self, now: Epoch, ttls: Ttls) -> Collected;
}

pub struct FixtureCollector {
    doc: FixtureDocument,
    tick: usize,
}

impl FixtureCollector {
    pub fn new(doc: FixtureDocument) -> Self {
        FixtureCollector { doc, tick: 0 }
    }
}

impl Collector for FixtureCollector {
    fn collect(&mut self, now: Epoch, ttls: Ttls) -> Collected {
        let mut out = Collected::default();
        for m in &self.doc.metrics {
            let v = m.values[self.tick.min(m.values.len() - 1)].clone();
            out.push(&m.name, v, &m.units, m.kind, now, ttls);
        }
        self.tick += 1;
        out
    }
}

/// Reads the local host through `sysinfo`.
pub struct SystemCollector {
    sys: sysinfo::System,
    disks: sysinfo::Disks,
}

impl Default for SystemCollector {
    fn default() -> Self {
        Self::new()
    }
}

impl SystemCollector {
    pub fn new() -> Self {
        let mut sys = sysinfo::System::new();
        sys.refresh_cpu_all();
        sys.refresh_memory();
        SystemCollector {
            sys,
            disks: sysinfo::Disks::new_with_refreshed_list(),
        }
    }
}

const MB: u64 = 1024 * 1024;

impl Collector for SystemCollector {
    fn collect(&mut self, now: Epoch, ttls: Ttls) -> Collected {
        use MetricKind::{Dynamic, Static};
        self.sys.refresh_cpu_all();
        self.sys.refresh_memory();
        self.disks.refresh(true);
        let mut out = Collected::default();

        match sysinfo::System::name() {
            Some(n) if !n.is_empty() => out.push("os.name", Value::Str(n), "", Static, now, ttls),
            _ => out.missing("os.name", "not reported by the OS"),
        }
        match sysinfo::System::kernel_version() {
            Some(r) if !r.is_empty() => {
                out.push("os.release", Value::Str(r), "", Static, now, ttls)
            }
            _ => out.missing("os.release", "not reported by the OS"),
        }
        let cpus = self.sys.cpus();
        match cpus.first() {
            Some(cpu) => {
                let model = match cpu.brand().trim() {
                    "" => cpu.vendor_id().trim().to_owned(),
                    b => b.to_owned(),
                };
                if model.is_empty() {
                    out.missing("cpu.model", "no brand string");
                } else {
                    out.push("cpu.model", Value::Str(model), "", Static, now, ttls);
                }
                out.push(
                    "cpu.count",
                    Value::Int(cpus.len() as i64),
                    "",
                    Static,
                    now,
                    ttls,
                );
                out.push(
                    "cpu.mhz",
                    Value::Int(cpu.frequency() as i64),
                    "MHz",
                    Static,
                    now,
                    ttls,
                );
            }
            None => {
                for m in ["cpu.model", "cpu.count", "cpu.mhz"] {
                    out.missing(m, "no CPUs reported");
                }
            }
        }
        out.push(
            "mem.total_mb",
            Value::Int((self.sys.total_memory() / MB) as i64),
            "MB",
            Static,
            now,
            ttls,
        );

        let load = sysinfo::System::load_average();
        out.push("load.one", Value::Float(load.one), "", Dynamic, now, ttls);
        out.push("load.five", Value::Float(load.five), "", Dynamic, now, ttls);
        out.push(
            "load.fifteen",
            Value::Float(load.fifteen),
            "",
            Dynamic,
            now,
            ttls,
        );
        out.push(
            "cpu.util_pct",
            Value::Float(f64::from(self.sys.global_cpu_usage())),
            "%",
            Dynamic,
            now,
            ttls,
        );
        out.push(
            "mem.free_mb",
            Value::Int((self.sys.available_memory() / MB) as i64),
            "MB",
            Dynamic,
            now,
            ttls,
        );
        if self.disks.list().is_empty() {
            out.missing("disk.free_mb", "no disks reported");
        } else {
            let free: u64 = self.disks.list().iter().map(|d| d.available_space()).sum();
            out.push(
                "disk.free_mb",
                Value::Int((free / MB) as i64),
                "MB",
                Dynamic,
                now,
                ttls,
            );
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Agent state

#[derive(Debug)]
struct Snapshot {
    record: HostRecord,
    bytes: Arc<[u8]>,
}

/// Agent state: the sole writer is whoever calls [`Agent::collect_now`];
/// readers always see a complete snapshot.
pub struct Agent {
    host_id: String,
    cluster: String,
    ttls: Ttls,
    collector: Mutex<Box<dyn Collector>>,
    snapshot: ArcSwapOption<Snapshot>,
    announce_disabled: AtomicBool,
}

impl Agent {
    pub fn new(
        host_id: impl Into<String>,
        cluster: impl Into<String>,
        ttls: Ttls,
        collector: Box<dyn Collector>,
    ) -> Self {
        Agent {
            host_id: host_id.into(),
            cluster: cluster.into(),
            ttls,
            collector: Mutex::new(collector),
            snapshot: ArcSwapOption::empty(),
            announce_disabled: AtomicBool::new(false),
        }
    }

    pub fn from_config(config: &AgentConfig) -> Result<Self, AgentError> {
        config.validate()?;
        let collector: Box<dyn Collector> = match &config.collector_backend {
            CollectorBackend::System => Box::new(SystemCollector::new()),
            CollectorBackend::Fixture(path) => {
                Box::new(FixtureCollector::new(FixtureDocument::load(path)?))
            }
        };
        let host_id = config.host_id.clone().unwrap_or_else(default_host_id);
        Ok(Agent::new(
            host_id,
            config.cluster.clone(),
            config.ttls(),
            collector,
        ))
    }

    pub fn host_id(&self) -> &str {
        &self.host_id
    }

    /// Collects once and replaces the snapshot. Metrics that could not be
    /// read keep their previous sample.
    pub fn collect_now(&self, now: Epoch) -> Collected {
        let collected = self
            .collector
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .collect(now, self.ttls);
        for miss in &collected.unavailable {
            warn!(metric = %miss.metric, reason = %miss.reason, "collector unavailable");
        }
        let mut fresh = HostRecord::new(&self.host_id, &self.cluster, AGENT_VERSION, now);
        for s in &collected.samples {
            fresh.insert(s.clone());
        }
        let record = match self.snapshot.load_full() {
            Some(prev) => merge(&prev.record, &fresh).expect("same host id"),
            None => fresh,
        };
        let view = ClusterView::new(&self.cluster, now).with_host(record.clone());
        let bytes: Arc<[u8]> = canonical_serialize(&view).into();
        self.snapshot
            .store(Some(Arc::new(Snapshot { record, bytes })));
        collected
    }

    /// The canonical single-host document for the latest collection.
    pub fn serve_snapshot(&self) -> Result<Arc<[u8]>, AgentError> {
        self.snapshot
            .load()
            .as_ref()
            .map(|s| s.bytes.clone())
            .ok_or(AgentError::NotReady)
    }

    pub fn latest_record(&self) -> Option<HostRecord> {
        self.snapshot.load().as_ref().map(|s| s.record.clone())
    }

    /// Sends the current snapshot as one datagram. Oversized documents
    /// switch the agent to pull-only.
    pub async fn announce(&self, socket: &UdpSocket, target: &str) -> Result<(), AgentError> {
        if self.announce_disabled.load(Ordering::Relaxed) {
            return Ok(());
        }
        let bytes = self.serve_snapshot()?;
        if bytes.len() > MAX_ANNOUNCE_BYTES {
            if !self.announce_disabled.swap(true, Ordering::Relaxed) {
                warn!(
                    bytes = bytes.len(),
                    "snapshot exceeds announce limit; falling back to pull-only"
                );
            }
            return Err(AgentError::DocumentTooLarge(bytes.len()));
        }
        socket
            .send_to(&bytes, target)
            .await
            .map(|_| ())
            .map_err(AgentError::Network)
    }

    pub fn announce_disabled(&self) -> bool {
        self.announce_disabled.load(Ordering::Relaxed)
    }
}

/// The OS hostname, or `localhost` when it cannot be read.
pub fn default_host_id() -> String {
    sysinfo::System::host_name()
        .filter(|h| !h.is_empty())
        .unwrap_or_else(|| "localhost".to_owned())
}

// ---------------------------------------------------------------------------
// Service loop

/// A running agent. Dropping the handle leaves the agent running; call
/// [`AgentHandle::shutdown`] to stop it and release its port.
pub struct AgentHandle {
    pub agent: Arc<Agent>,
    pub local_addr: std::net::SocketAddr,
    connections: Arc<AtomicU64>,
    tasks: Vec<JoinHandle<()>>,
}

impl AgentHandle {
    /// Pull connections accepted so far.
    pub fn connections(&self) -> u64 {
        self.connections.load(Ordering::SeqCst)
    }

    pub fn shutdown(self) {
        for t in &self.tasks {
            t.abort();
        }
    }

    pub async fn join(self) {
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

/// Binds the pull listener and starts the collection loop.
pub async fn spawn(config: &AgentConfig) -> Result<AgentHandle, AgentError> {
    let agent = Arc::new(Agent::from_config(config)?);
    let addr = format!("{}:{}", config.listen_address, config.listen_port);
    let listener = TcpListener::bind(&addr)
        .await
        .map_err(|source| AgentError::Bind {
            addr: addr.clone(),
            source,
        })?;
    let local_addr = listener
        .local_addr()
        .map_err(|source| AgentError::Bind { addr, source })?;
    let connections = Arc::new(AtomicU64::new(0));
    info!(host = %agent.host_id, %local_addr, "agent listening");

    let interval = Duration::from_secs(config.collect_interval_seconds);
    let collect_task = tokio::spawn(collect_loop(
        agent.clone(),
        interval,
        config.announce_target.clone(),
    ));
    let serve_task = tokio::spawn(serve_loop(agent.clone(), listener, connections.clone()));
    Ok(AgentHandle {
        agent,
        local_addr,
        connections,
        tasks: vec![collect_task, serve_task],
    })
}

/// Runs the agent until its tasks end; only returns on startup failure.
pub async fn run(config: &AgentConfig) -> Result<(), AgentError> {
    spawn(config).await?.join().await;
    Ok(())
}

async fn collect_loop(agent: Arc<Agent>, interval: Duration, target: Option<String>) {
    let socket = match &target {
        Some(_) => match UdpSocket::bind("0.0.0.0:0").await {
            Ok(s) => Some(s),
            Err(e) => {
                error!(error = %e, "cannot open announce socket; pull-only");
                None
            }
        },
        None => None,
    };
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        ticker.tick().await;
        agent.collect_now(now_secs());
        if let (Some(sock), Some(target)) = (&socket, &target) {
            match agent.announce(sock, target).await {
                Ok(()) | Err(AgentError::DocumentTooLarge(_)) => {}
                Err(e) => debug!(error = %e, "announce failed"),
            }
        }
    }
}

async fn serve_loop(agent: Arc<Agent>, listener: TcpListener, connections: Arc<AtomicU64>) {
    loop {
        let (mut stream, peer) = match listener.accept().await {
            Ok(c) => c,
            Err(e) => {
                warn!(error = %e, "accept failed");
                continue;
            }
        };
        connections.fetch_add(1, Ordering::SeqCst);
        let agent = agent.clone();
        tokio::spawn(async move {
            match agent.serve_snapshot() {
                Ok(bytes) => {
                    if let Err(e) = stream.write_all(&bytes).await {
                        debug!(%peer, error = %e, "pull write failed");
                    }
                }
                Err(e) => debug!(%peer, error = %e, "pull before first collection"),
            }
            let _ = stream.shutdown().await;
        });
    }
}
