//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or syntax error, 2 server or network
//! failure, 3 not found. Output goes to `out` only on success.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use reqwest::{Method, StatusCode, Url};

use crate::agent::AgentConfig;
use crate::daemon::AggregatorConfig;
use crate::http::{HostJson, QueryRequest};
use crate::model::{serialize_index, ClusterView, Epoch, HostRecord, MetricSample, Value};
use crate::persistence::{FrameStore, StoreError};
use crate::query::Query;
use crate::trigger::{RuleSpec, TriggerRule};

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8642";
pub const SERVER_ENV: &str = "CAMPUS_DISCOVERY_SERVER";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_SERVER: i32 = 2;
pub const EXIT_NOT_FOUND: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "campus-discovery",
    version,
    about = "Campus grid resource discovery"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Node agent
    Agent {
        #[command(subcommand)]
        action: DaemonAction,
    },
    /// Aggregator, index service, trigger loop and snapshot capture
    Aggregator {
        #[command(subcommand)]
        action: DaemonAction,
    },
    /// Query the index service
    Query {
        expr: String,
        #[arg(long, env = SERVER_ENV, default_value = DEFAULT_SERVER)]
        server: String,
        #[arg(long, value_enum, default_value_t = Output::Table)]
        output: Output,
        /// Comma-separated metric paths
        #[arg(long, value_delimiter = ',')]
        project: Vec<String>,
    },
    /// Fetch a rendered view
    Render {
        view: String,
        #[arg(long, default_value = "")]
        query: String,
        #[arg(long, env = SERVER_ENV, default_value = DEFAULT_SERVER)]
        server: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Manage trigger rules
    Trigger {
        #[command(subcommand)]
        action: TriggerAction,
        #[arg(long, global = true, env = SERVER_ENV, default_value = DEFAULT_SERVER)]
        server: String,
    },
    /// Query a stored snapshot offline
    Replay {
        #[arg(long)]
        store: PathBuf,
        /// Epoch seconds or RFC 3339 time; the newest frame at or before it is used
        #[arg(long)]
        at: String,
        #[arg(long, default_value = "")]
        query: String,
        #[arg(long, value_enum, default_value_t = Output::Table)]
        output: Output,
        #[arg(long, value_delimiter = ',')]
        project: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum DaemonAction {
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum TriggerAction {
    /// Add the rule (or array of rules) in a JSON file
    Add {
        #[arg(long)]
        file: PathBuf,
    },
    List {
        #[arg(long, value_enum, default_value_t = Output::Table)]
        output: Output,
    },
    Rm {
        id: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Output {
    Table,
    Json,
    Xml,
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }
    fn server(message: impl Into<String>) -> Self {
        Self::new(EXIT_SERVER, message)
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let _ = write!(err, "{e}");
            return EXIT_USAGE;
        }
    };
    match execute(cli.command) {
        Ok(bytes) => {
            if out.write_all(&bytes).and_then(|_| out.flush()).is_err() {
                return EXIT_SERVER;
            }
            EXIT_OK
        }
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn execute(command: Command) -> Result<Vec<u8>, Failure> {
    match command {
        Command::Agent {
            action: DaemonAction::Run { config },
        } => {
            let config = AgentConfig::load(&config).map_err(|e| Failure::usage(e.to_string()))?;
            init_logging();
            daemon_runtime()?
                .block_on(crate::agent::run(&config))
                .map_err(|e| Failure::server(e.to_string()))?;
            Ok(Vec::new())
        }
        Command::Aggregator {
            action: DaemonAction::Run { config },
        } => {
            let config =
                AggregatorConfig::load(&config).map_err(|e| Failure::usage(e.to_string()))?;
            init_logging();
            daemon_runtime()?
                .block_on(crate::daemon::run(config))
                .map_err(|e| Failure::server(e.to_string()))?;
            Ok(Vec::new())
        }
        Command::Query {
            expr,
            server,
            output,
            project,
        } => {
            let query = parse_query(&expr, &project)?;
            let url = endpoint(&server, "/v1/query")?;
            let body = serde_json::to_vec(&QueryRequest {
                q: expr,
                project: project.clone(),
            })
            .map_err(|e| Failure::usage(e.to_string()))?;
            let raw = request(Method::POST, url, Some(body))?;
            if output == Output::Json {
                return Ok(raw);
            }
            let hosts: Vec<HostJson> = serde_json::from_slice(&raw)
                .map_err(|e| Failure::server(format!("bad response: {e}")))?;
            format_hosts(&hosts, &query.projection, output)
        }
        Command::Render {
            view,
            query,
            server,
            out,
        } => {
            parse_query(&query, &[])?;
            let mut url = endpoint(&server, &format!("/v1/view/{view}"))?;
            if !query.is_empty() {
                url.query_pairs_mut().append_pair("q", &query);
            }
            let html = request(Method::GET, url, None)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &html)
                        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
                    Ok(Vec::new())
                }
                None => Ok(html),
            }
        }
        Command::Trigger { action, server } => trigger(action, &server),
        Command::Replay {
            store,
            at,
            query,
            output,
            project,
        } => replay(&store, &at, &query, &project, output),
    }
}

fn trigger(action: TriggerAction, server: &str) -> Result<Vec<u8>, Failure> {
    match action {
        TriggerAction::Add { file } => {
            let text = std::fs::read_to_string(&file)
                .map_err(|e| Failure::usage(format!("{}: {e}", file.display())))?;
            let specs: Vec<RuleSpec> = match serde_json::from_str::<serde_json::Value>(&text) {
                Ok(v @ serde_json::Value::Array(_)) => serde_json::from_value(v),
                Ok(v) => serde_json::from_value(v).map(|s| vec![s]),
                Err(e) => Err(e),
            }
            .map_err(|e| Failure::usage(format!("{}: {e}", file.display())))?;
            // validate everything before sending anything
            for s in &specs {
                TriggerRule::new(s.clone()).map_err(|e| Failure::usage(e.to_string()))?;
            }
            let mut out = Vec::new();
            for s in specs {
                let body = serde_json::to_vec(&s).map_err(|e| Failure::usage(e.to_string()))?;
                request(Method::POST, endpoint(server, "/v1/triggers")?, Some(body))?;
                writeln!(out, "added {}", s.id).ok();
            }
            Ok(out)
        }
        TriggerAction::List { output } => {
            let raw = request(Method::GET, endpoint(server, "/v1/triggers")?, None)?;
            if output != Output::Table {
                return Ok(raw);
            }
            let rules: Vec<RuleSpec> = serde_json::from_slice(&raw)
                .map_err(|e| Failure::server(format!("bad response: {e}")))?;
            let rows = rules
                .iter()
                .map(|r| {
                    let (kind, arg) = match &r.action {
                        crate::trigger::Action::Log(t) => ("log", t),
                        crate::trigger::Action::Exec(c) => ("exec", c),
                        crate::trigger::Action::Webhook(u) => ("webhook", u),
                    };
                    vec![
                        r.id.clone(),
                        r.enabled.to_string(),
                        r.condition.clone(),
                        r.sustain_samples.to_string(),
                        r.cooldown_seconds.to_string(),
                        format!("{kind}: {arg}"),
                    ]
                })
                .collect();
            Ok(table(
                &[
                    "ID",
                    "ENABLED",
                    "CONDITION",
                    "SUSTAIN",
                    "COOLDOWN",
                    "ACTION",
                ],
                rows,
            ))
        }
        TriggerAction::Rm { id } => {
            request(
                Method::DELETE,
                endpoint(server, &format!("/v1/triggers/{id}"))?,
                None,
            )?;
            Ok(format!("removed {id}\n").into_bytes())
        }
    }
}

fn replay(
    store: &std::path::Path,
    at: &str,
    expr: &str,
    project: &[String],
    output: Output,
) -> Result<Vec<u8>, Failure> {
    let query = parse_query(expr, project)?;
    let t = parse_time(at).ok_or_else(|| Failure::usage(format!("invalid timestamp {at:?}")))?;
    if !store.is_dir() {
        return Err(Failure::new(
            EXIT_NOT_FOUND,
            format!("{}: no such store", store.display()),
        ));
    }
    let frames = FrameStore::open(store, u64::MAX).map_err(|e| Failure::server(e.to_string()))?;
    let frame = frames.at_or_before(t).map_err(|e| match e {
        StoreError::NotFound => Failure::new(EXIT_NOT_FOUND, format!("no frame at or before {at}")),
        e => Failure::server(e.to_string()),
    })?;
    let views = frame
        .views()
        .map_err(|e| Failure::server(format!("frame {}: {e}", frame.captured_at)))?;
    let hosts = crate::query::evaluate(
        views.iter().flat_map(|v| v.hosts.values()),
        &query,
        frame.captured_at,
    );
    let hosts: Vec<HostJson> = hosts
        .iter()
        .map(|h| HostJson::new(h, frame.version))
        .collect();
    if output == Output::Json {
        return serde_json::to_vec(&hosts).map_err(|e| Failure::server(e.to_string()));
    }
    format_hosts(&hosts, &query.projection, output)
}

pub fn parse_time(text: &str) -> Option<Epoch> {
    if let Ok(secs) = text.parse::<Epoch>() {
        return Some(secs);
    }
    let t = chrono::DateTime::parse_from_rfc3339(text).ok()?;
    Epoch::try_from(t.timestamp()).ok()
}

fn parse_query(expr: &str, project: &[String]) -> Result<Query, Failure> {
    let syntax = |e: crate::query::SyntaxError| {
        Failure::usage(format!(
            "syntax error at offset {}: {}",
            e.offset, e.message
        ))
    };
    Query::parse(expr)
        .map_err(syntax)?
        .with_projection(project.iter().cloned())
        .map_err(syntax)
}

fn endpoint(server: &str, path: &str) -> Result<Url, Failure> {
    let base = Url::parse(server)
        .map_err(|e| Failure::usage(format!("invalid server URL {server:?}: {e}")))?;
    base.join(path)
        .map_err(|e| Failure::usage(format!("invalid server URL {server:?}: {e}")))
}

fn request(method: Method, url: Url, json_body: Option<Vec<u8>>) -> Result<Vec<u8>, Failure> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::server(e.to_string()))?;
    rt.block_on(async move {
        let client = reqwest::Client::new();
        let mut req = client.request(method, url.clone());
        if let Some(body) = json_body {
            req = req
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| Failure::server(format!("{url}: {e}")))?;
        let status = resp.status();
        let body = resp
            .bytes()
            .await
            .map_err(|e| Failure::server(format!("{url}: {e}")))?;
        if status.is_success() {
            return Ok(body.to_vec());
        }
        let message = serde_json::from_slice::<serde_json::Value>(&body)
            .ok()
            .and_then(|v| v.get("message").and_then(|m| m.as_str()).map(str::to_owned))
            .unwrap_or_else(|| String::from_utf8_lossy(&body).into_owned());
        let code = match status {
            StatusCode::NOT_FOUND => EXIT_NOT_FOUND,
            StatusCode::BAD_REQUEST | StatusCode::CONFLICT => EXIT_USAGE,
            _ => EXIT_SERVER,
        };
        Err(Failure::new(code, format!("{status}: {message}")))
    })
}

fn format_hosts(
    hosts: &[HostJson],
    projection: &[String],
    output: Output,
) -> Result<Vec<u8>, Failure> {
    match output {
        Output::Json => serde_json::to_vec(hosts).map_err(|e| Failure::server(e.to_string())),
        Output::Xml => {
            let mut views: BTreeMap<&str, ClusterView> = BTreeMap::new();
            for h in hosts {
                let rec = host_record(h).map_err(Failure::server)?;
                let view = views
                    .entry(h.cluster.as_str())
                    .or_insert_with(|| ClusterView::new(h.cluster.clone(), 0));
                view.generated_at = view.generated_at.max(h.heartbeat_at);
                view.hosts.insert(rec.host_id.clone(), rec);
            }
            Ok(serialize_index(views.values()))
        }
        Output::Table => {
            let columns: Vec<String> = if projection.is_empty() {
                let names: BTreeSet<&String> =
                    hosts.iter().flat_map(|h| h.metrics.keys()).collect();
                names.into_iter().cloned().collect()
            } else {
                projection.to_vec()
            };
            let mut header = vec!["CLUSTER".to_owned(), "HOST".to_owned()];
            header.extend(columns.iter().cloned());
            let rows =
                hosts
                    .iter()
                    .map(|h| {
                        let mut row = vec![h.cluster.clone(), h.host_id.clone()];
                        row.extend(columns.iter().map(
                            |c| match h.metrics.get(c).map(|m| &m.value) {
                                Some(serde_json::Value::String(s)) => s.clone(),
                                Some(v) => v.to_string(),
                                None => "-".to_owned(),
                            },
                        ));
                        row
                    })
                    .collect();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            Ok(table(&header, rows))
        }
    }
}

/// Rebuilds a host record from its wire form.
pub fn host_record(h: &HostJson) -> Result<HostRecord, String> {
    let mut rec = HostRecord::new(&h.host_id, &h.cluster, &h.agent_version, h.heartbeat_at);
    for (name, m) in &h.metrics {
        let value = Value::from_json(m.value_type, &m.value)
            .ok_or_else(|| format!("metric {name}: value does not match type"))?;
        let sample =
            MetricSample::new(name, value, &m.units, m.kind, m.collected_at, m.ttl_seconds)
                .map_err(|e| e.to_string())?;
        rec.insert(sample);
    }
    Ok(rec)
}

fn table(header: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut l = String::new();
        for (i, cell) in cells.enumerate() {
            if i > 0 {
                l.push_str("  ");
            }
            l.push_str(cell);
            let pad = widths[i].saturating_sub(cell.chars().count());
            l.extend(std::iter::repeat_n(' ', pad));
        }
        out.push_str(l.trim_end());
        out.push('\n');
    };
    line(&mut header.iter().copied());
    for row in &rows {
        line(&mut row.iter().map(String::as_str));
    }
    out.into_bytes()
}

fn daemon_runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::server(e.to_string()))
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .try_init();
}
