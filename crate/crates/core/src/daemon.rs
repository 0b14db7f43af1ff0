//! The aggregator daemon: HTTP API, UDP push listener, sweeper, trigger loop
//! and snapshot capture, wired around one index.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;
use tokio::net::{TcpListener, UdpSocket};
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

use crate::aggregator::Aggregator;
use crate::http::{self, ApiState, DEFAULT_MAX_RESULTS};
use crate::index::Index;
use crate::model::Epoch;
use crate::persistence::{
    FrameStore, SnapshotFrame, StoreError, DEFAULT_CAPTURE_INTERVAL, DEFAULT_RETENTION,
};
use crate::render::RenderEngine;
use crate::sources::SourceSpec;
use crate::subscription::{SubscriptionStore, DEFAULT_SUBSCRIPTION_LIFETIME};
use crate::trigger::{load_rules, TriggerService, TriggerStore};
use crate::{Clock, SystemClock};

pub const DEFAULT_HTTP_LISTEN: &str = "127.0.0.1:8642";

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn default_http_listen() -> String {
    DEFAULT_HTTP_LISTEN.to_owned()
}
fn default_sweep() -> u64 {
    5
}
fn default_trigger_interval() -> u64 {
    10
}
fn default_capture() -> u64 {
    DEFAULT_CAPTURE_INTERVAL
}
fn default_retention() -> u64 {
    DEFAULT_RETENTION
}
fn default_max_results() -> usize {
    DEFAULT_MAX_RESULTS
}
fn default_sub_lifetime() -> u64 {
    DEFAULT_SUBSCRIPTION_LIFETIME
}

/// Aggregator config file. Relative paths are resolved against the
/// directory holding the file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    #[serde(default = "default_http_listen")]
    pub http_listen: String,
    /// UDP address for push sources; no listener when absent.
    #[serde(default)]
    pub push_listen: Option<String>,
    #[serde(default = "default_sweep")]
    pub sweep_interval_seconds: u64,
    #[serde(default = "default_trigger_interval")]
    pub trigger_interval_seconds: u64,
    #[serde(default)]
    pub rules_file: Option<PathBuf>,
    #[serde(default)]
    pub trigger_log: Option<PathBuf>,
    /// Snapshot store directory; capture is off when absent.
    #[serde(default)]
    pub store_dir: Option<PathBuf>,
    #[serde(default = "default_capture")]
    pub capture_interval_seconds: u64,
    #[serde(default = "default_retention")]
    pub retention_seconds: u64,
    /// Load the newest stored frame into the index at startup.
    #[serde(default)]
    pub restore_on_start: bool,
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    #[serde(default)]
    pub ui_dir: Option<PathBuf>,
    #[serde(default = "default_max_results")]
    pub max_results: usize,
    #[serde(default = "default_sub_lifetime")]
    pub subscription_lifetime_seconds: u64,
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl AggregatorConfig {
    pub fn from_json(text: &str) -> Result<Self, DaemonError> {
        let config: AggregatorConfig =
            serde_json::from_str(text).map_err(|e| DaemonError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, DaemonError> {
        let err = |message: String| DaemonError::Config {
            path: path.to_owned(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut config = Self::from_json(&text).map_err(|e| err(e.to_string()))?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.rules_file,
            &mut self.trigger_log,
            &mut self.store_dir,
            &mut self.template_dir,
            &mut self.ui_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), DaemonError> {
        for (name, v) in [
            ("sweep_interval_seconds", self.sweep_interval_seconds),
            ("trigger_interval_seconds", self.trigger_interval_seconds),
            ("capture_interval_seconds", self.capture_interval_seconds),
            (
                "subscription_lifetime_seconds",
                self.subscription_lifetime_seconds,
            ),
        ] {
            if v == 0 {
                return Err(DaemonError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.max_results == 0 {
            return Err(DaemonError::Invalid("max_results must be positive".into()));
        }
        for s in &self.sources {
            s.validate()
                .map_err(|e| DaemonError::Invalid(e.to_string()))?;
        }
        Ok(())
    }
}

/// Stores one frame of the current index unless an identical
/// (captured_at, version) frame is already stored.
pub fn capture(
    store: &FrameStore,
    index: &Index,
    now: Epoch,
) -> Result<Option<SnapshotFrame>, StoreError> {
    let snapshot = index.snapshot();
    let frame = SnapshotFrame::new(now, snapshot.version, snapshot.to_xml());
    match store.store(&frame) {
        Ok(()) => Ok(Some(frame)),
        Err(StoreError::OutOfOrderFrame { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Replaces the index contents with a stored frame.
pub fn restore_frame(index: &Index, frame: &SnapshotFrame, now: Epoch) -> Result<u64, StoreError> {
    let views = frame
        .views()
        .map_err(|e| StoreError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
    Ok(index.restore(&views, now))
}

/// A running aggregator. Dropping it stops every task.
pub struct Daemon {
    pub http_addr: SocketAddr,
    pub push_addr: Option<SocketAddr>,
    pub state: ApiState,
    pub store: Option<FrameStore>,
    tasks: Vec<JoinHandle<()>>,
}

impl Daemon {
    pub async fn start(config: AggregatorConfig) -> Result<Daemon, DaemonError> {
        Self::start_with_clock(config, Arc::new(SystemClock)).await
    }

    pub async fn start_with_clock(
        config: AggregatorConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Daemon, DaemonError> {
        config.validate()?;
        let index = Arc::new(Index::new());
        let aggregator = Aggregator::with_clock(index.clone(), clock.clone());

        let store = match &config.store_dir {
            Some(dir) => Some(FrameStore::open(dir, config.retention_seconds)?),
            None => None,
        };
        if let (true, Some(store)) = (config.restore_on_start, &store) {
            match store.latest() {
                Ok(frame) => {
                    restore_frame(&index, &frame, clock.now())?;
                    info!(captured_at = frame.captured_at, "restored snapshot");
                }
                Err(StoreError::NotFound) => {}
                Err(e) => return Err(e.into()),
            }
        }

        let rules = match &config.rules_file {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| DaemonError::Config {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                load_rules(&bytes).map_err(|e| DaemonError::Config {
                    path: path.clone(),
                    message: e.to_string(),
                })?
            }
            None => Vec::new(),
        };
        let triggers = Arc::new(TriggerService::new(
            Arc::new(TriggerStore::new(rules)),
            config.trigger_log.clone(),
        ));
        let render = match &config.template_dir {
            Some(dir) => RenderEngine::with_dir(dir).map_err(|e| DaemonError::Config {
                path: dir.clone(),
                message: e.to_string(),
            })?,
            None => RenderEngine::builtin(),
        };
        let subscriptions = Arc::new(SubscriptionStore::new(config.subscription_lifetime_seconds));
        let state = ApiState {
            aggregator: aggregator.clone(),
            subscriptions: subscriptions.clone(),
            triggers: triggers.clone(),
            render: Arc::new(render),
            clock: clock.clone(),
            max_results: config.max_results,
            ui_dir: config.ui_dir.clone(),
        };

        for spec in &config.sources {
            aggregator
                .register_source(spec.clone(), clock.now())
                .map_err(|e| DaemonError::Invalid(e.to_string()))?;
        }

        let mut tasks = Vec::new();
        let bind_err = |addr: &str| {
            let addr = addr.to_owned();
            move |source| DaemonError::Bind { addr, source }
        };

        let listener = TcpListener::bind(&config.http_listen)
            .await
            .map_err(bind_err(&config.http_listen))?;
        let http_addr = listener
            .local_addr()
            .map_err(bind_err(&config.http_listen))?;
        let app = http::router(state.clone());
        tasks.push(tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                warn!(error = %e, "http server stopped");
            }
        }));
        info!(addr = %http_addr, "index service listening");

        let push_addr = match &config.push_listen {
            Some(addr) => {
                let socket = UdpSocket::bind(addr).await.map_err(bind_err(addr))?;
                let local = socket.local_addr().map_err(bind_err(addr))?;
                tasks.push(tokio::spawn(push_loop(socket, aggregator.clone())));
                info!(addr = %local, "push listener bound");
                Some(local)
            }
            None => None,
        };

        {
            let aggregator = aggregator.clone();
            let subscriptions = subscriptions.clone();
            tasks.push(tokio::spawn(every(
                config.sweep_interval_seconds,
                move || {
                    let now = aggregator.clock().now();
                    aggregator.expire_leases(now);
                    let removed = aggregator.sweep_stale(now);
                    if !removed.is_empty() {
                        debug!(?removed, "swept stale hosts");
                    }
                    subscriptions.gc(now);
                },
            )));
        }

        {
            let index = index.clone();
            let clock = clock.clone();
            let period = Duration::from_secs(config.trigger_interval_seconds);
            tasks.push(tokio::spawn(async move {
                let mut ticker = tokio::time::interval(period);
                ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                loop {
                    ticker.tick().await;
                    triggers.run_cycle(&index.snapshot(), clock.now()).await;
                }
            }));
        }

        if let Some(store) = store.clone() {
            let index = index.clone();
            let clock = clock.clone();
            let period = Duration::from_secs(config.capture_interval_seconds);
            tasks.push(tokio::spawn(async move {
                let mut ticker = tokio::time::interval(period);
                ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                ticker.tick().await;
                loop {
                    ticker.tick().await;
                    // failures are retried on the next tick
                    if let Err(e) = capture(&store, &index, clock.now()) {
                        warn!(error = %e, "snapshot capture failed");
                    }
                }
            }));
        }

        Ok(Daemon {
            http_addr,
            push_addr,
            state,
            store,
            tasks,
        })
    }

    pub fn aggregator(&self) -> &Arc<Aggregator> {
        &self.state.aggregator
    }

    pub fn index(&self) -> &Arc<Index> {
        self.state.aggregator.index()
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    /// Captures a frame now, outside the schedule.
    pub fn capture_now(&self) -> Result<Option<SnapshotFrame>, StoreError> {
        let store = self.store.as_ref().ok_or(StoreError::NotFound)?;
        capture(store, self.index(), self.state.clock.now())
    }

    /// Runs until the HTTP server stops.
    pub async fn wait(mut self) {
        if !self.tasks.is_empty() {
            let _ = self.tasks.remove(0).await;
        }
    }

    pub fn shutdown(self) {
        drop(self);
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

async fn every<F: FnMut() + Send + 'static>(seconds: u64, mut f: F) {
    let mut ticker = tokio::time::interval(Duration::from_secs(seconds));
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        ticker.tick().await;
        f();
    }
}

async fn push_loop(socket: UdpSocket, aggregator: Arc<Aggregator>) {
    let mut buf = vec![0u8; 65536];
    loop {
        match socket.recv_from(&mut buf).await {
            Ok((n, from)) => {
                let now = aggregator.clock().now();
                if let Err(e) = aggregator.handle_push(&buf[..n], now) {
                    debug!(%from, error = %e, "push datagram dropped");
                }
            }
            Err(e) => warn!(error = %e, "push receive failed"),
        }
    }
}

/// Runs the daemon described by `config` until the process is stopped.
pub async fn run(config: AggregatorConfig) -> Result<(), DaemonError> {
    let daemon = Daemon::start(config).await?;
    daemon.wait().await;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = AggregatorConfig::default();
        assert_eq!(c.http_listen, "127.0.0.1:8642");
        assert_eq!(c.capture_interval_seconds, 60);
        assert_eq!(c.retention_seconds, 7 * 24 * 3600);
        assert_eq!(c.max_results, 1000);
        assert!(c.sources.is_empty());
    }

    #[test]
    fn rejects_unknown_keys_and_zero_intervals() {
        assert!(AggregatorConfig::from_json(r#"{"sweep":1}"#).is_err());
        assert!(AggregatorConfig::from_json(r#"{"sweep_interval_seconds":0}"#).is_err());
        let c = AggregatorConfig::from_json(
            r#"{"sources":[{"source_id":"a","kind":"pull","address":"127.0.0.1:1","poll_interval_seconds":5,"lifetime_seconds":60}]}"#,
        )
        .unwrap();
        assert_eq!(c.sources[0], SourceSpec::pull("a", "127.0.0.1:1", 5, 60));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agg.json");
        std::fs::write(
            &path,
            r#"{"store_dir":"frames","trigger_log":"/var/log/t.jsonl"}"#,
        )
        .unwrap();
        let c = AggregatorConfig::load(&path).unwrap();
        assert_eq!(c.store_dir.unwrap(), dir.path().join("frames"));
        assert_eq!(c.trigger_log.unwrap(), PathBuf::from("/var/log/t.jsonl"));
    }
}
