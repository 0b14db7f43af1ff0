//! Resource model: typed metric samples, host records, cluster views, and the
//! canonical XML document they serialize to.
//!
//! Canonical output is a pure function of the value: hosts are ordered by
//! host id, metrics by name, attributes in a fixed order, and indentation is
//! two spaces per nesting level.
//!
//! ```text
//! <cluster name="NAME" generated="EPOCH">
//!   <host name="HOST_ID" cluster="NAME" heartbeat="EPOCH" agent="VERSION">
//!     <metric name="PATH" type="TYPE" kind="KIND" val="LEXICAL" units="U" tn="EPOCH" ttl="SECONDS"/>
//!   </host>
//! </cluster>
//! ```
//!
//! A multi-cluster document wraps cluster elements (sorted by name) in an
//! `<index>` root element.

use std::collections::BTreeMap;
use std::fmt;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seconds since the Unix epoch.
pub type Epoch = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("host mismatch: {current} != {incoming}")]
    HostMismatch { current: String, incoming: String },
    #[error("unknown metric {0}")]
    UnknownMetric(String),
    #[error("invalid metric name {0:?}")]
    InvalidName(String),
    #[error("invalid sample {name}: {reason}")]
    InvalidSample { name: String, reason: String },
}

fn malformed(msg: impl Into<String>) -> ModelError {
    ModelError::MalformedDocument(msg.into())
}

/// Returns true when `name` is a dotted lowercase path such as `cpu.count`.
pub fn is_valid_metric_name(name: &str) -> bool {
    !name.is_empty()
        && name.split('.').all(|seg| {
            !seg.is_empty()
                && seg
                    .bytes()
                    .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Static,
    Dynamic,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Static => "static",
            MetricKind::Dynamic => "dynamic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "static" => Some(MetricKind::Static),
            "dynamic" => Some(MetricKind::Dynamic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    String,
    Int,
    Float,
    Bool,
}

impl ValueType {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueType::String => "string",
            ValueType::Int => "int",
            ValueType::Float => "float",
            ValueType::Bool => "bool",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "string" => Some(ValueType::String),
            "int" => Some(ValueType::Int),
            "float" => Some(ValueType::Float),
            "bool" => Some(ValueType::Bool),
            _ => None,
        }
    }
}

/// A scalar metric value with an explicit type tag.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
}

impl Value {
    pub fn value_type(&self) -> ValueType {
        match self {
            Value::Str(_) => ValueType::String,
            Value::Int(_) => ValueType::Int,
            Value::Float(_) => ValueType::Float,
            Value::Bool(_) => ValueType::Bool,
        }
    }

    /// Lexical form used on the wire and in rendered output.
    pub fn lexical(&self) -> String {
        match self {
            Value::Str(s) => s.clone(),
            Value::Int(i) => i.to_string(),
            Value::Float(f) => format_float(*f),
            Value::Bool(b) => b.to_string(),
        }
    }

    /// Parses `text` as a value of type `ty`.
    pub fn from_lexical(ty: ValueType, text: &str) -> Option<Value> {
        match ty {
            ValueType::String => Some(Value::Str(text.to_owned())),
            ValueType::Int => text.parse().ok().map(Value::Int),
            ValueType::Float => text
                .parse::<f64>()
                .ok()
                .filter(|f| f.is_finite())
                .map(Value::Float),
            ValueType::Bool => match text {
                "true" => Some(Value::Bool(true)),
                "false" => Some(Value::Bool(false)),
                _ => None,
            },
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Str(s) => serde_json::Value::String(s.clone()),
            Value::Int(i) => serde_json::Value::from(*i),
            Value::Float(f) => serde_json::Value::from(*f),
            Value::Bool(b) => serde_json::Value::Bool(*b),
        }
    }

    /// Converts a JSON scalar into a value of the declared type.
    pub fn from_json(ty: ValueType, v: &serde_json::Value) -> Option<Value> {
        match (ty, v) {
            (ValueType::String, serde_json::Value::String(s)) => Some(Value::Str(s.clone())),
            (ValueType::Int, serde_json::Value::Number(n)) => n.as_i64().map(Value::Int),
            (ValueType::Float, serde_json::Value::Number(n)) => {
                n.as_f64().filter(|f| f.is_finite()).map(Value::Float)
            }
            (ValueType::Bool, serde_json::Value::Bool(b)) => Some(Value::Bool(*b)),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.lexical())
    }
}

/// Shortest decimal that round-trips. Negative zero renders as `0`.
pub fn format_float(f: f64) -> String {
    if f == 0.0 {
        return "0".to_owned();
    }
    f.to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSample {
    pub name: String,
    pub value: Value,
    /// Empty when the metric has no units.
    pub units: String,
    pub kind: MetricKind,
    pub collected_at: Epoch,
    pub ttl_seconds: u64,
}

impl MetricSample {
    pub fn new(
        name: impl Into<String>,
        value: Value,
        units: impl Into<String>,
        kind: MetricKind,
        collected_at: Epoch,
        ttl_seconds: u64,
    ) -> Result<Self, ModelError> {
        let sample = MetricSample {
            name: name.into(),
            value,
            units: units.into(),
            kind,
            collected_at,
            ttl_seconds,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !is_valid_metric_name(&self.name) {
            return Err(ModelError::InvalidName(self.name.clone()));
        }
        let invalid = |reason: &str| ModelError::InvalidSample {
            name: self.name.clone(),
            reason: reason.to_owned(),
        };
        if self.ttl_seconds == 0 {
            return Err(invalid("ttl must be positive"));
        }
        if let Value::Float(f) = self.value {
            if !f.is_finite() {
                return Err(invalid("float value must be finite"));
            }
        }
        Ok(())
    }

    /// Inclusive freshness: `now - collected_at <= ttl`. A sample stamped in
    /// the future (clock skew) counts as fresh.
    pub fn is_fresh(&self, now: Epoch) -> bool {
        now.saturating_sub(self.collected_at) <= self.ttl_seconds
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HostRecord {
    pub host_id: String,
    pub cluster: String,
    pub agent_version: String,
    pub heartbeat_at: Epoch,
    pub samples: BTreeMap<String, MetricSample>,
}

impl HostRecord {
    pub fn new(
        host_id: impl Into<String>,
        cluster: impl Into<String>,
        agent_version: impl Into<String>,
        heartbeat_at: Epoch,
    ) -> Self {
        HostRecord {
            host_id: host_id.into(),
            cluster: cluster.into(),
            agent_version: agent_version.into(),
            heartbeat_at,
            samples: BTreeMap::new(),
        }
    }

    /// Inserts a sample, replacing any previous sample with the same name.
    pub fn insert(&mut self, sample: MetricSample) {
        self.samples.insert(sample.name.clone(), sample);
    }

    pub fn with_sample(mut self, sample: MetricSample) -> Self {
        self.insert(sample);
        self
    }

    pub fn get(&self, name: &str) -> Option<&MetricSample> {
        self.samples.get(name)
    }

    /// The sample if present and fresh at `now`.
    pub fn fresh(&self, name: &str, now: Epoch) -> Option<&MetricSample> {
        self.samples.get(name).filter(|s| s.is_fresh(now))
    }

    /// True when at least one sample is fresh.
    pub fn is_live(&self, now: Epoch) -> bool {
        self.samples.values().any(|s| s.is_fresh(now))
    }

    /// Copy of the record holding only its fresh samples.
    pub fn fresh_only(&self, now: Epoch) -> HostRecord {
        HostRecord {
            samples: self
                .samples
                .iter()
                .filter(|(_, s)| s.is_fresh(now))
                .map(|(k, s)| (k.clone(), s.clone()))
                .collect(),
            ..self.header()
        }
    }

    fn header(&self) -> HostRecord {
        HostRecord::new(
            self.host_id.clone(),
            self.cluster.clone(),
            self.agent_version.clone(),
            self.heartbeat_at,
        )
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.host_id.is_empty() {
            return Err(malformed("empty host id"));
        }
        for (name, sample) in &self.samples {
            if name != &sample.name {
                return Err(malformed(format!(
                    "sample keyed {name} is named {}",
                    sample.name
                )));
            }
            sample.validate()?;
        }
        Ok(())
    }
}

pub fn is_fresh(record: &HostRecord, metric_name: &str, now: Epoch) -> Result<bool, ModelError> {
    record
        .get(metric_name)
        .map(|s| s.is_fresh(now))
        .ok_or_else(|| ModelError::UnknownMetric(metric_name.to_owned()))
}

/// Merges two observations of the same host. Per metric the later
/// `collected_at` wins and ties go to `incoming`; the heartbeat is the max.
pub fn merge(current: &HostRecord, incoming: &HostRecord) -> Result<HostRecord, ModelError> {
    if current.host_id != incoming.host_id {
        return Err(ModelError::HostMismatch {
            current: current.host_id.clone(),
            incoming: incoming.host_id.clone(),
        });
    }
    let mut samples = current.samples.clone();
    for (name, sample) in &incoming.samples {
        match samples.get(name) {
            Some(existing) if existing.collected_at > sample.collected_at => {}
            _ => {
                samples.insert(name.clone(), sample.clone());
            }
        }
    }
    let newer = if current.heartbeat_at > incoming.heartbeat_at {
        current
    } else {
        incoming
    };
    Ok(HostRecord {
        host_id: incoming.host_id.clone(),
        cluster: newer.cluster.clone(),
        agent_version: newer.agent_version.clone(),
        heartbeat_at: current.heartbeat_at.max(incoming.heartbeat_at),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterView {
    pub name: String,
    pub hosts: BTreeMap<String, HostRecord>,
    pub generated_at: Epoch,
}

impl ClusterView {
    pub fn new(name: impl Into<String>, generated_at: Epoch) -> Self {
        ClusterView {
            name: name.into(),
            hosts: BTreeMap::new(),
            generated_at,
        }
    }

    pub fn with_host(mut self, host: HostRecord) -> Self {
        self.hosts.insert(host.host_id.clone(), host);
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (id, host) in &self.hosts {
            if id != &host.host_id {
                return Err(malformed(format!(
                    "host keyed {id} is named {}",
                    host.host_id
                )));
            }
            if host.cluster != self.name {
                return Err(malformed(format!(
                    "host {id} claims cluster {} inside cluster {}",
                    host.cluster, self.name
                )));
            }
            host.validate()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Canonical serialization

fn escape_attr(out: &mut String, value: &str) {
    for c in value.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\t' => out.push_str("&#9;"),
            '\n' => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
}

fn push_attr(out: &mut String, key: &str, value: &str) {
    out.push(' ');
    out.push_str(key);
    out.push_str("=\"");
    escape_attr(out, value);
    out.push('"');
}

fn indent(out: &mut String, depth: usize) {
    out.push('\n');
    for _ in 0..depth {
        out.push_str("  ");
    }
}

fn write_metric(out: &mut String, m: &MetricSample) {
    out.push_str("<metric");
    push_attr(out, "name", &m.name);
    push_attr(out, "type", m.value.value_type().as_str());
    push_attr(out, "kind", m.kind.as_str());
    push_attr(out, "val", &m.value.lexical());
    if !m.units.is_empty() {
        push_attr(out, "units", &m.units);
    }
    push_attr(out, "tn", &m.collected_at.to_string());
    push_attr(out, "ttl", &m.ttl_seconds.to_string());
    out.push_str("/>");
}

fn write_host(out: &mut String, h: &HostRecord, depth: usize) {
    out.push_str("<host");
    push_attr(out, "name", &h.host_id);
    push_attr(out, "cluster", &h.cluster);
    push_attr(out, "heartbeat", &h.heartbeat_at.to_string());
    push_attr(out, "agent", &h.agent_version);
    out.push('>');
    for m in h.samples.values() {
        indent(out, depth + 1);
        write_metric(out, m);
    }
    if !h.samples.is_empty() {
        indent(out, depth);
    }
    out.push_str("</host>");
}

fn write_cluster(out: &mut String, v: &ClusterView, depth: usize) {
    out.push_str("<cluster");
    push_attr(out, "name", &v.name);
    push_attr(out, "generated", &v.generated_at.to_string());
    out.push('>');
    for h in v.hosts.values() {
        indent(out, depth + 1);
        write_host(out, h, depth + 1);
    }
    if !v.hosts.is_empty() {
        indent(out, depth);
    }
    out.push_str("</cluster>");
}

/// Canonical XML for one cluster, terminated by a newline.
pub fn canonical_serialize(view: &ClusterView) -> Vec<u8> {
    let mut out = String::new();
    write_cluster(&mut out, view, 0);
    out.push('\n');
    out.into_bytes()
}

/// Canonical XML for a set of clusters under an `<index>` root. Clusters are
/// emitted in name order regardless of input order.
pub fn serialize_index<'a>(views: impl IntoIterator<Item = &'a ClusterView>) -> Vec<u8> {
    let mut sorted: Vec<&ClusterView> = views.into_iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut out = String::from("<index>");
    for v in &sorted {
        indent(&mut out, 1);
        write_cluster(&mut out, v, 1);
    }
    if !sorted.is_empty() {
        indent(&mut out, 0);
    }
    out.push_str("</index>\n");
    out.into_bytes()
}

// ---------------------------------------------------------------------------
// Parsing

struct Attrs(BTreeMap<String, String>);

impl Attrs {
    fn read(e: &BytesStart<'_>, allowed: &[&str]) -> Result<Attrs, ModelError> {
        let element = String::from_utf8_lossy(e.name().as_ref()).into_owned();
        let mut map = BTreeMap::new();
        for attr in e.attributes() {
            let attr = attr.map_err(|err| malformed(format!("<{element}>: {err}")))?;
            let key = std::str::from_utf8(attr.key.as_ref())
                .map_err(|_| malformed("non-utf8 attribute name"))?
                .to_owned();
            if !allowed.contains(&key.as_str()) {
                return Err(malformed(format!(
                    "<{element}>: unexpected attribute {key}"
                )));
            }
            let value = attr
                .unescape_value()
                .map_err(|err| malformed(format!("<{element} {key}>: {err}")))?
                .into_owned();
            if map.insert(key.clone(), value).is_some() {
                return Err(malformed(format!("<{element}>: duplicate attribute {key}")));
            }
        }
        Ok(Attrs(map))
    }

    fn take(&mut self, key: &str, element: &str) -> Result<String, ModelError> {
        self.0
            .remove(key)
            .ok_or_else(|| malformed(format!("<{element}>: missing attribute {key}")))
    }

    fn epoch(&mut self, key: &str, element: &str) -> Result<Epoch, ModelError> {
        let raw = self.take(key, element)?;
        raw.parse()
            .map_err(|_| malformed(format!("<{element} {key}>: not an integer: {raw:?}")))
    }
}

fn parse_cluster_start(e: &BytesStart<'_>) -> Result<ClusterView, ModelError> {
    let mut a = Attrs::read(e, &["name", "generated"])?;
    Ok(ClusterView::new(
        a.take("name", "cluster")?,
        a.epoch("generated", "cluster")?,
    ))
}

fn parse_host_start(e: &BytesStart<'_>) -> Result<HostRecord, ModelError> {
    let mut a = Attrs::read(e, &["name", "cluster", "heartbeat", "agent"])?;
    let host_id = a.take("name", "host")?;
    if host_id.is_empty() {
        return Err(malformed("<host>: empty name"));
    }
    Ok(HostRecord::new(
        host_id,
        a.take("cluster", "host")?,
        a.take("agent", "host")?,
        a.epoch("heartbeat", "host")?,
    ))
}

fn parse_metric(e: &BytesStart<'_>) -> Result<MetricSample, ModelError> {
    let mut a = Attrs::read(e, &["name", "type", "kind", "val", "units", "tn", "ttl"])?;
    let name = a.take("name", "metric")?;
    let ty_raw = a.take("type", "metric")?;
    let ty = ValueType::parse(&ty_raw)
        .ok_or_else(|| malformed(format!("metric {name}: unknown type {ty_raw:?}")))?;
    let kind_raw = a.take("kind", "metric")?;
    let kind = MetricKind::parse(&kind_raw)
        .ok_or_else(|| malformed(format!("metric {name}: unknown kind {kind_raw:?}")))?;
    let val = a.take("val", "metric")?;
    let value = Value::from_lexical(ty, &val)
        .ok_or_else(|| malformed(format!("metric {name}: {val:?} is not a valid {ty_raw}")))?;
    let units = a.0.remove("units").unwrap_or_default();
    let collected_at = a.epoch("tn", "metric")?;
    let ttl = a.epoch("ttl", "metric")?;
    MetricSample::new(name, value, units, kind, collected_at, ttl)
        .map_err(|err| malformed(err.to_string()))
}

#[derive(Debug)]
enum Frame {
    Index(Vec<ClusterView>),
    Cluster(ClusterView),
    Host(HostRecord),
}

fn element_name(e: &BytesStart<'_>) -> Result<String, ModelError> {
    std::str::from_utf8(e.name().as_ref())
        .map(str::to_owned)
        .map_err(|_| malformed("non-utf8 element name"))
}

/// Parses either a `<cluster>` or an `<index>` document into its clusters.
fn parse_document(data: &[u8]) -> Result<(bool, Vec<ClusterView>), ModelError> {
    let text = std::str::from_utf8(data).map_err(|_| malformed("document is not UTF-8"))?;
    let mut reader = Reader::from_str(text);
    let mut stack: Vec<Frame> = Vec::new();
    let mut result: Option<(bool, Vec<ClusterView>)> = None;

    loop {
        let event = reader
            .read_event()
            .map_err(|err| malformed(format!("at byte {}: {err}", reader.buffer_position())))?;
        if result.is_some() {
            match event {
                Event::Eof => break,
                Event::Text(t) if t.iter().all(u8::is_ascii_whitespace) => continue,
                Event::Comment(_) => continue,
                _ => return Err(malformed("content after the root element")),
            }
        }
        match event {
            Event::Decl(_) | Event::Comment(_) | Event::PI(_) | Event::DocType(_) => {}
            Event::Text(t) => {
                if !t.iter().all(u8::is_ascii_whitespace) {
                    return Err(malformed("unexpected text content"));
                }
            }
            Event::CData(_) => return Err(malformed("unexpected CDATA")),
            Event::Start(e) => {
                let name = element_name(&e)?;
                let frame = match (stack.last(), name.as_str()) {
                    (None, "index") => {
                        Attrs::read(&e, &[])?;
                        Frame::Index(Vec::new())
                    }
                    (None | Some(Frame::Index(_)), "cluster") => {
                        Frame::Cluster(parse_cluster_start(&e)?)
                    }
                    (Some(Frame::Cluster(_)), "host") => Frame::Host(parse_host_start(&e)?),
                    _ => return Err(malformed(format!("unexpected element <{name}>"))),
                };
                stack.push(frame);
            }
            Event::Empty(e) => {
                let name = element_name(&e)?;
                match (stack.last_mut(), name.as_str()) {
                    (None, "index") => {
                        Attrs::read(&e, &[])?;
                        result = Some((true, Vec::new()));
                    }
                    (None, "cluster") => {
                        result = Some((false, vec![parse_cluster_start(&e)?]));
                    }
                    (Some(Frame::Index(clusters)), "cluster") => {
                        clusters.push(parse_cluster_start(&e)?);
                    }
                    (Some(Frame::Cluster(view)), "host") => {
                        let host = parse_host_start(&e)?;
                        add_host(view, host)?;
                    }
                    (Some(Frame::Host(host)), "metric") => {
                        let sample = parse_metric(&e)?;
                        if host.samples.contains_key(&sample.name) {
                            return Err(malformed(format!(
                                "host {}: duplicate metric {}",
                                host.host_id, sample.name
                            )));
                        }
                        host.insert(sample);
                    }
                    _ => return Err(malformed(format!("unexpected element <{name}/>"))),
                }
            }
            Event::End(_) => match stack.pop() {
                Some(Frame::Host(host)) => match stack.last_mut() {
                    Some(Frame::Cluster(view)) => add_host(view, host)?,
                    _ => return Err(malformed("host outside cluster")),
                },
                Some(Frame::Cluster(view)) => match stack.last_mut() {
                    Some(Frame::Index(clusters)) => clusters.push(view),
                    None => result = Some((false, vec![view])),
                    _ => return Err(malformed("cluster in unexpected position")),
                },
                Some(Frame::Index(clusters)) => result = Some((true, clusters)),
                None => return Err(malformed("unbalanced end tag")),
            },
            Event::Eof => return Err(malformed("unexpected end of document")),
        }
    }
    result.ok_or_else(|| malformed("empty document"))
}

fn add_host(view: &mut ClusterView, host: HostRecord) -> Result<(), ModelError> {
    if host.cluster != view.name {
        return Err(malformed(format!(
            "host {} claims cluster {} inside cluster {}",
            host.host_id, host.cluster, view.name
        )));
    }
    if view.hosts.contains_key(&host.host_id) {
        return Err(malformed(format!("duplicate host {}", host.host_id)));
    }
    view.hosts.insert(host.host_id.clone(), host);
    Ok(())
}

/// Parses a single-cluster document.
pub fn parse(data: &[u8]) -> Result<ClusterView, ModelError> {
    match parse_document(data)? {
        (false, mut clusters) if clusters.len() == 1 => Ok(clusters.remove(0)),
        _ => Err(malformed("expected a <cluster> root element")),
    }
}

/// Parses a multi-cluster `<index>` document. A bare `<cluster>` document is
/// accepted as a one-cluster index.
pub fn parse_index(data: &[u8]) -> Result<Vec<ClusterView>, ModelError> {
    let (_, clusters) = parse_document(data)?;
    let mut seen = std::collections::BTreeSet::new();
    let mut hosts = std::collections::BTreeSet::new();
    for c in &clusters {
        if !seen.insert(c.name.as_str()) {
            return Err(malformed(format!("duplicate cluster {}", c.name)));
        }
        for id in c.hosts.keys() {
            if !hosts.insert(id.as_str()) {
                return Err(malformed(format!("host {id} appears in two clusters")));
            }
        }
    }
    Ok(clusters)
}
