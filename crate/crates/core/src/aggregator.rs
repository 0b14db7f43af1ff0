//! Source polling, push intake, and the lease sweeper that feed the [`Index`].

use std::collections::HashMap;
use std::process::Stdio;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, Weak};
use std::time::Duration;

use thiserror::Error;
use tokio::io::AsyncReadExt;
use tokio::net::TcpStream;
use tokio::task::AbortHandle;
use tracing::{debug, info, warn};

use crate::index::Index;
use crate::model::{parse, ClusterView, Epoch, ModelError};
use crate::sources::{
    first_poll_delay, SourceError, SourceKind, SourceRegistration, SourceRegistry, SourceSpec,
};
use crate::{Clock, SystemClock};

/// Upper bound on any single pull or exec poll.
pub const MAX_POLL_TIMEOUT: Duration = Duration::from_secs(10);

/// Largest document accepted from a pull source or exec provider.
const MAX_DOCUMENT_BYTES: u64 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum PollError {
    #[error("source unreachable: {0}")]
    SourceUnreachable(String),
    #[error(transparent)]
    MalformedDocument(#[from] ModelError),
    #[error("provider exited with status {code:?}: {stderr}")]
    ExecFailure { code: Option<i32>, stderr: String },
    #[error("source {0} is not polled")]
    NotPolled(String),
    #[error(transparent)]
    Source(#[from] SourceError),
}

/// Fetches the document served by a node agent: connect, read to EOF.
pub async fn fetch_pull(address: &str, timeout: Duration) -> Result<Vec<u8>, PollError> {
    let fetch = async {
        let stream = TcpStream::connect(address).await?;
        let mut buf = Vec::new();
        stream
            .take(MAX_DOCUMENT_BYTES)
            .read_to_end(&mut buf)
            .await?;
        Ok::<_, std::io::Error>(buf)
    };
    match tokio::time::timeout(timeout, fetch).await {
        Ok(Ok(buf)) => Ok(buf),
        Ok(Err(e)) => Err(PollError::SourceUnreachable(format!("{address}: {e}"))),
        Err(_) => Err(PollError::SourceUnreachable(format!(
            "{address}: timed out"
        ))),
    }
}

/// Runs an information provider through `sh -c` with no stdin and returns
/// its standard output.
pub async fn run_exec(command: &str, timeout: Duration) -> Result<Vec<u8>, PollError> {
    let child = tokio::process::Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .kill_on_drop(true)
        .spawn()
        .map_err(|e| PollError::ExecFailure {
            code: None,
            stderr: e.to_string(),
        })?;
    let output = match tokio::time::timeout(timeout, child.wait_with_output()).await {
        Ok(Ok(out)) => out,
        Ok(Err(e)) => {
            return Err(PollError::ExecFailure {
                code: None,
                stderr: e.to_string(),
            })
        }
        Err(_) => {
            return Err(PollError::ExecFailure {
                code: None,
                stderr: "timed out".into(),
            })
        }
    };
    if !output.status.success() {
        return Err(PollError::ExecFailure {
            code: output.status.code(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_owned(),
        });
    }
    Ok(output.stdout)
}

/// Polls one pull or exec source and parses its cluster document.
pub async fn poll_source(kind: &SourceKind, timeout: Duration) -> Result<ClusterView, PollError> {
    let bytes = match kind {
        SourceKind::Pull { address } => fetch_pull(address, timeout).await?,
        SourceKind::Exec { command } => run_exec(command, timeout).await?,
        SourceKind::Push { cluster } => return Err(PollError::NotPolled(cluster.clone())),
    };
    Ok(parse(&bytes)?)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PushRejected {
    #[error("malformed push document: {0}")]
    Malformed(ModelError),
    #[error("no live push source registered for cluster {0}")]
    UnregisteredCluster(String),
}

/// Owns the source registry and the pollers that feed the shared index.
pub struct Aggregator {
    index: Arc<Index>,
    registry: Mutex<SourceRegistry>,
    pollers: Mutex<HashMap<String, AbortHandle>>,
    dropped_push: AtomicU64,
    poll_timeout: Duration,
    clock: Arc<dyn Clock>,
}

impl Aggregator {
    pub fn new(index: Arc<Index>) -> Arc<Self> {
        Self::with_clock(index, Arc::new(SystemClock))
    }

    pub fn with_clock(index: Arc<Index>, clock: Arc<dyn Clock>) -> Arc<Self> {
        Arc::new(Aggregator {
            index,
            registry: Mutex::new(SourceRegistry::new()),
            pollers: Mutex::new(HashMap::new()),
            dropped_push: AtomicU64::new(0),
            poll_timeout: MAX_POLL_TIMEOUT,
            clock,
        })
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn index(&self) -> &Arc<Index> {
        &self.index
    }

    fn registry(&self) -> MutexGuard<'_, SourceRegistry> {
        self.registry.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Registers a source and, for pull/exec sources inside a Tokio runtime,
    /// schedules its poller.
    pub fn register_source(
        self: &Arc<Self>,
        spec: SourceSpec,
        now: Epoch,
    ) -> Result<SourceRegistration, SourceError> {
        let reg = self.registry().register(spec, now)?;
        info!(source = %reg.source_id, expires = reg.lease_expires_at, "source registered");
        if let (Some(interval), Ok(rt)) = (
            reg.poll_interval_seconds,
            tokio::runtime::Handle::try_current(),
        ) {
            let interval = Duration::from_secs(interval);
            let weak = Arc::downgrade(self);
            let id = reg.source_id.clone();
            let task = rt.spawn(poll_loop(weak, id.clone(), interval));
            if let Some(old) = self
                .pollers
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .insert(id, task.abort_handle())
            {
                old.abort();
            }
        }
        Ok(reg)
    }

    pub fn renew_lease(
        &self,
        source_id: &str,
        now: Epoch,
    ) -> Result<SourceRegistration, SourceError> {
        let result = self.registry().renew(source_id, now);
        if let Err(SourceError::LeaseExpired(id)) = &result {
            self.unschedule(id);
        }
        result
    }

    pub fn deregister(&self, source_id: &str) -> Result<SourceRegistration, SourceError> {
        let reg = self.registry().deregister(source_id)?;
        self.unschedule(source_id);
        Ok(reg)
    }

    /// Deregisters and unschedules every source whose lease ended before
    /// `now`. Hosts ingested from them stay until they go stale.
    pub fn expire_leases(&self, now: Epoch) -> Vec<String> {
        let expired = self.registry().expire(now);
        for id in &expired {
            info!(source = %id, "lease expired");
            self.unschedule(id);
        }
        expired
    }

    fn unschedule(&self, source_id: &str) {
        if let Some(h) = self
            .pollers
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remove(source_id)
        {
            h.abort();
        }
    }

    pub fn sources(&self) -> Vec<SourceRegistration> {
        self.registry().list()
    }

    pub fn source(&self, source_id: &str) -> Option<SourceRegistration> {
        self.registry().get(source_id).cloned()
    }

    pub fn scheduled_pollers(&self) -> usize {
        self.pollers.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    /// Push datagrams dropped because no live push source claimed them.
    pub fn dropped_push_count(&self) -> u64 {
        self.dropped_push.load(Ordering::Relaxed)
    }

    /// Polls a registered source once and ingests the result. Failures are
    /// counted on the registration.
    pub async fn poll_once(&self, source_id: &str) -> Result<u64, PollError> {
        let kind = {
            let reg = self.registry();
            match reg.get(source_id) {
                Some(r) if !r.is_expired(self.clock.now()) => r.kind.clone(),
                Some(_) => return Err(SourceError::LeaseExpired(source_id.to_owned()).into()),
                None => return Err(SourceError::UnknownSource(source_id.to_owned()).into()),
            }
        };
        match poll_source(&kind, self.poll_timeout).await {
            Ok(view) => {
                let now = self.clock.now();
                let version = self.index.ingest(&view, now);
                self.registry().record_success(source_id, now);
                Ok(version)
            }
            Err(e) => {
                self.registry().record_failure(source_id, e.to_string());
                Err(e)
            }
        }
    }

    /// Handles one push datagram: the document's cluster name selects the
    /// registration that accepts it.
    pub fn handle_push(&self, payload: &[u8], now: Epoch) -> Result<u64, PushRejected> {
        let view = match parse(payload) {
            Ok(v) => v,
            Err(e) => {
                self.dropped_push.fetch_add(1, Ordering::Relaxed);
                return Err(PushRejected::Malformed(e));
            }
        };
        let source = self
            .registry()
            .push_source_for(&view.name, now)
            .map(|r| r.source_id.clone());
        match source {
            Some(id) => {
                let version = self.index.ingest(&view, now);
                self.registry().record_success(&id, now);
                Ok(version)
            }
            None => {
                self.dropped_push.fetch_add(1, Ordering::Relaxed);
                Err(PushRejected::UnregisteredCluster(view.name))
            }
        }
    }

    pub fn sweep_stale(&self, now: Epoch) -> Vec<String> {
        self.index.sweep_stale(now)
    }
}

impl Drop for Aggregator {
    fn drop(&mut self) {
        for (_, h) in self
            .pollers
            .get_mut()
            .unwrap_or_else(|e| e.into_inner())
            .drain()
        {
            h.abort();
        }
    }
}

async fn poll_loop(agg: Weak<Aggregator>, source_id: String, interval: Duration) {
    tokio::time::sleep(first_poll_delay(&source_id, interval)).await;
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        ticker.tick().await;
        let Some(agg) = agg.upgrade() else { return };
        if !agg.registry().is_live(&source_id, agg.clock.now()) {
            debug!(source = %source_id, "lease ended; poller stopping");
            return;
        }
        if let Err(e) = agg.poll_once(&source_id).await {
            warn!(source = %source_id, error = %e, "poll failed");
        }
    }
}
