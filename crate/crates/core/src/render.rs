//! A small template language for turning query results into portal pages.
//!
//! Directives:
//!
//! * `{{path}}` substitutes a metric's lexical value (HTML-escaped), or `n/a`
//!   when the metric is missing or stale.
//! * `{{host.id}}`, `{{host.cluster}}` and `{{meta.generated_at}}`.
//! * `{{#each hosts}}...{{/each}}` repeats its body per host in
//!   (cluster, host id) order.
//! * `{{#if EXPR}}...{{/if}}` keeps its body when the query expression holds
//!   for the current host.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::model::{Epoch, HostRecord};
use crate::query::{parse_filter, Expr, Path as QueryPath};

pub const MISSING: &str = "n/a";

const BUILTIN: [(&str, &str); 4] = [
    ("index", include_str!("../templates/index.tmpl")),
    ("basic", include_str!("../templates/basic.tmpl")),
    ("processor", include_str!("../templates/processor.tmpl")),
    ("memory", include_str!("../templates/memory.tmpl")),
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("cannot read templates: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Field {
    HostId,
    HostCluster,
    GeneratedAt,
    Metric(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Text(String),
    Subst(Field),
    Each(Vec<Node>),
    If(Expr, Vec<Node>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub name: String,
    nodes: Vec<Node>,
}

enum Open {
    Each,
    If(Expr),
}

impl Template {
    pub fn compile(name: impl Into<String>, source: &str) -> Result<Template, TemplateError> {
        let err = |pos: usize, message: String| TemplateError::Syntax {
            line: source[..pos].matches('\n').count() + 1,
            message,
        };
        // (opening directive, its position, nodes collected before it)
        let mut stack: Vec<(Open, usize, Vec<Node>)> = Vec::new();
        let mut nodes: Vec<Node> = Vec::new();
        let mut rest = 0;
        while let Some(off) = source[rest..].find("{{") {
            let start = rest + off;
            if start > rest {
                nodes.push(Node::Text(source[rest..start].to_owned()));
            }
            let close = source[start..]
                .find("}}")
                .ok_or_else(|| err(start, "unterminated `{{`".into()))?;
            let body = source[start + 2..start + close].trim();
            rest = start + close + 2;

            if let Some(directive) = body.strip_prefix('#') {
                let (word, arg) = directive
                    .split_once(char::is_whitespace)
                    .map(|(w, a)| (w, a.trim()))
                    .unwrap_or((directive, ""));
                let open = match word {
                    "each" if arg == "hosts" => {
                        if stack.iter().any(|(o, _, _)| matches!(o, Open::Each)) {
                            return Err(err(start, "nested {{#each}}".into()));
                        }
                        Open::Each
                    }
                    "each" => {
                        return Err(err(start, format!("can only iterate `hosts`, not {arg:?}")))
                    }
                    "if" => match parse_filter(arg) {
                        Ok(Some(expr)) => Open::If(expr),
                        Ok(None) => return Err(err(start, "empty {{#if}} condition".into())),
                        Err(e) => return Err(err(start, format!("bad condition: {e}"))),
                    },
                    other => return Err(err(start, format!("unknown directive #{other}"))),
                };
                stack.push((open, start, std::mem::take(&mut nodes)));
            } else if let Some(word) = body.strip_prefix('/') {
                let (open, _, outer) = stack
                    .pop()
                    .ok_or_else(|| err(start, format!("{{{{/{word}}}}} without an open block")))?;
                let inner = std::mem::replace(&mut nodes, outer);
                let node = match (open, word) {
                    (Open::Each, "each") => Node::Each(inner),
                    (Open::If(expr), "if") => Node::If(expr, inner),
                    (_, other) => return Err(err(start, format!("mismatched {{{{/{other}}}}}"))),
                };
                nodes.push(node);
            } else {
                let field = match body {
                    "host.id" => Field::HostId,
                    "host.cluster" => Field::HostCluster,
                    "meta.generated_at" => Field::GeneratedAt,
                    p => match QueryPath::parse(p) {
                        Some(QueryPath::Metric(m)) => Field::Metric(m),
                        _ => return Err(err(start, format!("bad path {p:?}"))),
                    },
                };
                nodes.push(Node::Subst(field));
            }
        }
        if let Some((open, pos, _)) = stack.pop() {
            let which = match open {
                Open::Each => "each",
                Open::If(_) => "if",
            };
            return Err(err(pos, format!("unclosed {{{{#{which}}}}}")));
        }
        if rest < source.len() {
            nodes.push(Node::Text(source[rest..].to_owned()));
        }
        Ok(Template {
            name: name.into(),
            nodes,
        })
    }

    /// Renders `hosts`; a pure function of its inputs.
    pub fn render(&self, hosts: &[HostRecord], now: Epoch) -> Vec<u8> {
        let mut sorted: Vec<&HostRecord> = hosts.iter().collect();
        sorted.sort_by(|a, b| (&a.cluster, &a.host_id).cmp(&(&b.cluster, &b.host_id)));
        let mut out = String::new();
        render_nodes(&self.nodes, &sorted, None, now, &mut out);
        out.into_bytes()
    }
}

fn render_nodes(
    nodes: &[Node],
    hosts: &[&HostRecord],
    current: Option<&HostRecord>,
    now: Epoch,
    out: &mut String,
) {
    for node in nodes {
        match node {
            Node::Text(t) => out.push_str(t),
            Node::Subst(field) => {
                let value = match (field, current) {
                    (Field::GeneratedAt, _) => Some(now.to_string()),
                    (Field::HostId, Some(h)) => Some(h.host_id.clone()),
                    (Field::HostCluster, Some(h)) => Some(h.cluster.clone()),
                    (Field::Metric(m), Some(h)) => h.fresh(m, now).map(|s| s.value.lexical()),
                    _ => None,
                };
                match value {
                    Some(v) => escape_html(&v, out),
                    None => out.push_str(MISSING),
                }
            }
            Node::Each(body) => {
                for h in hosts {
                    render_nodes(body, hosts, Some(h), now, out);
                }
            }
            Node::If(expr, body) => {
                if current.is_some_and(|h| expr.matches(h, now)) {
                    render_nodes(body, hosts, current, now, out);
                }
            }
        }
    }
}

pub fn escape_html(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
}

/// Named, compiled templates shared read-only by request handlers.
#[derive(Debug, Clone)]
pub struct RenderEngine {
    templates: BTreeMap<String, Template>,
}

impl RenderEngine {
    /// The four shipped views: `index`, `basic`, `processor`, `memory`.
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(name, src)| {
                let t = Template::compile(*name, src).expect("built-in template compiles");
                (name.to_string(), t)
            })
            .collect();
        RenderEngine { templates }
    }

    /// Built-in views overlaid with every `<view>.tmpl` found in `dir`.
    pub fn with_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut engine = Self::builtin();
        let entries = std::fs::read_dir(dir)
            .map_err(|e| TemplateError::Io(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| TemplateError::Io(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("tmpl") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let src = std::fs::read_to_string(&path)
                .map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))?;
            let t = Template::compile(name, &src).map_err(|e| match e {
                TemplateError::Syntax { line, message } => TemplateError::Syntax {
                    line,
                    message: format!("{}: {message}", path.display()),
                },
                other => other,
            })?;
            engine.templates.insert(name.to_owned(), t);
        }
        Ok(engine)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Template> {
        self.templates.get(name)
    }

    pub fn render(
        &self,
        name: &str,
        hosts: &[HostRecord],
        now: Epoch,
    ) -> Result<Vec<u8>, TemplateError> {
        self.get(name)
            .map(|t| t.render(hosts, now))
            .ok_or_else(|| TemplateError::UnknownTemplate(name.to_owned()))
    }
}
