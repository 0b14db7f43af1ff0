//! Filter expressions over host records.
//!
//! ```text
//! expr   := clause (("and" | "or") clause)*      -- "and" binds tighter
//! clause := path op literal | "exists(" path ")" | "(" expr ")"
//! op     := == | != | < | <= | > | >= | ~=
//! ```
//!
//! `host.id` and `host.cluster` address the record header; every other path
//! names a metric. A clause over a missing or stale metric is false, as is
//! any comparison between mismatched types.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

use crate::model::{is_valid_metric_name, Epoch, HostRecord, Value};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("syntax error at offset {offset}: {message}")]
pub struct SyntaxError {
    pub offset: usize,
    pub message: String,
}

impl SyntaxError {
    fn new(offset: usize, message: impl Into<String>) -> Self {
        SyntaxError {
            offset,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Glob,
}

impl CompareOp {
    pub const ALL: [CompareOp; 7] = [
        CompareOp::Eq,
        CompareOp::Ne,
        CompareOp::Lt,
        CompareOp::Le,
        CompareOp::Gt,
        CompareOp::Ge,
        CompareOp::Glob,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            CompareOp::Eq => "==",
            CompareOp::Ne => "!=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
            CompareOp::Glob => "~=",
        }
    }

    fn holds(self, ord: Ordering) -> bool {
        match self {
            CompareOp::Eq => ord == Ordering::Equal,
            CompareOp::Ne => ord != Ordering::Equal,
            CompareOp::Lt => ord == Ordering::Less,
            CompareOp::Le => ord != Ordering::Greater,
            CompareOp::Gt => ord == Ordering::Greater,
            CompareOp::Ge => ord != Ordering::Less,
            CompareOp::Glob => false,
        }
    }
}

/// Left-hand side of a clause.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Path {
    HostId,
    HostCluster,
    Metric(String),
}

impl Path {
    pub fn parse(text: &str) -> Option<Path> {
        match text {
            "host.id" => Some(Path::HostId),
            "host.cluster" => Some(Path::HostCluster),
            t if is_valid_metric_name(t) => Some(Path::Metric(t.to_owned())),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Path::HostId => "host.id",
            Path::HostCluster => "host.cluster",
            Path::Metric(m) => m,
        }
    }

    /// The value this path resolves to on `host`, honoring freshness.
    pub fn resolve(&self, host: &HostRecord, now: Epoch) -> Option<Value> {
        match self {
            Path::HostId => Some(Value::Str(host.host_id.clone())),
            Path::HostCluster => Some(Value::Str(host.cluster.clone())),
            Path::Metric(name) => host.fresh(name, now).map(|s| s.value.clone()),
        }
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Compare {
        path: Path,
        op: CompareOp,
        literal: Value,
    },
    Exists(Path),
}

impl Expr {
    pub fn compare(path: &str, op: CompareOp, literal: Value) -> Expr {
        Expr::Compare {
            path: Path::parse(path).expect("valid path"),
            op,
            literal,
        }
    }

    pub fn and(self, rhs: Expr) -> Expr {
        Expr::And(Box::new(self), Box::new(rhs))
    }

    pub fn or(self, rhs: Expr) -> Expr {
        Expr::Or(Box::new(self), Box::new(rhs))
    }

    pub fn matches(&self, host: &HostRecord, now: Epoch) -> bool {
        match self {
            Expr::And(a, b) => a.matches(host, now) && b.matches(host, now),
            Expr::Or(a, b) => a.matches(host, now) || b.matches(host, now),
            Expr::Exists(path) => path.resolve(host, now).is_some(),
            Expr::Compare { path, op, literal } => match path.resolve(host, now) {
                Some(value) => compare_values(&value, *op, literal),
                None => false,
            },
        }
    }
}

/// Applies `op` between a record value and a literal.
pub fn compare_values(value: &Value, op: CompareOp, literal: &Value) -> bool {
    if op == CompareOp::Glob {
        let pattern = literal.lexical();
        return glob::Pattern::new(&pattern)
            .map(|p| p.matches(&value.lexical()))
            .unwrap_or(false);
    }
    let ord = match (value, literal) {
        (Value::Int(a), Value::Int(b)) => a.cmp(b),
        (Value::Str(a), Value::Str(b)) => a.as_bytes().cmp(b.as_bytes()),
        (Value::Bool(a), Value::Bool(b)) => {
            return match op {
                CompareOp::Eq => a == b,
                CompareOp::Ne => a != b,
                _ => false,
            }
        }
        (a, b) => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => match x.partial_cmp(&y) {
                Some(o) => o,
                None => return false,
            },
            _ => return false,
        },
    };
    op.holds(ord)
}

fn write_string_literal(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

fn write_literal(f: &mut fmt::Formatter<'_>, v: &Value) -> fmt::Result {
    match v {
        Value::Str(s) => write_string_literal(f, s),
        Value::Int(i) => write!(f, "{i}"),
        // Debug keeps a decimal point or exponent so the literal reparses as a float.
        Value::Float(x) => write!(f, "{x:?}"),
        Value::Bool(b) => write!(f, "{b}"),
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesized binary nodes; reparses to an equal tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::And(a, b) => write!(f, "({a} and {b})"),
            Expr::Or(a, b) => write!(f, "({a} or {b})"),
            Expr::Exists(p) => write!(f, "exists({p})"),
            Expr::Compare { path, op, literal } => {
                write!(f, "{path} {} ", op.symbol())?;
                write_literal(f, literal)
            }
        }
    }
}

/// A parsed query: an optional filter (absent matches every live host) and
/// an optional projection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Query {
    pub filter: Option<Expr>,
    pub projection: Vec<String>,
}

impl Query {
    pub fn match_all() -> Self {
        Query::default()
    }

    pub fn parse(text: &str) -> Result<Query, SyntaxError> {
        Ok(Query {
            filter: parse_filter(text)?,
            projection: Vec::new(),
        })
    }

    pub fn with_projection<I, S>(mut self, paths: I) -> Result<Query, SyntaxError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        for p in paths {
            let p = p.into();
            if !is_valid_metric_name(&p) {
                return Err(SyntaxError::new(
                    0,
                    format!("invalid projection path {p:?}"),
                ));
            }
            self.projection.push(p);
        }
        Ok(self)
    }

    pub fn matches(&self, host: &HostRecord, now: Epoch) -> bool {
        self.filter.as_ref().is_none_or(|e| e.matches(host, now))
    }
}

pub fn parse_query(text: &str) -> Result<Query, SyntaxError> {
    Query::parse(text)
}

/// Parses filter text; blank text is the match-all filter.
pub fn parse_filter(text: &str) -> Result<Option<Expr>, SyntaxError> {
    let mut p = Parser { src: text, pos: 0 };
    p.skip_ws();
    if p.at_end() {
        return Ok(None);
    }
    let expr = p.expr()?;
    p.skip_ws();
    if !p.at_end() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(Some(expr))
}

/// Parses a single `path op literal` clause.
pub fn parse_clause(text: &str) -> Result<Expr, SyntaxError> {
    match parse_filter(text)? {
        Some(e @ Expr::Compare { .. }) => Ok(e),
        Some(_) => Err(SyntaxError::new(
            0,
            "expected a single `path op literal` clause",
        )),
        None => Err(SyntaxError::new(text.len(), "expected a clause")),
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

fn is_path_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'.'
}

impl<'a> Parser<'a> {
    fn bytes(&self) -> &'a [u8] {
        self.src.as_bytes()
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<u8> {
        self.bytes().get(self.pos).copied()
    }

    fn error(&self, message: impl Into<String>) -> SyntaxError {
        SyntaxError::new(self.pos, message)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b) if b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    /// Consumes `word` when it appears as a whole word at the cursor.
    fn keyword(&mut self, word: &str) -> bool {
        let rest = &self.bytes()[self.pos..];
        if rest.starts_with(word.as_bytes())
            && !rest.get(word.len()).copied().is_some_and(is_path_byte)
        {
            self.pos += word.len();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.conjunction()?;
        loop {
            self.skip_ws();
            if self.keyword("or") {
                let rhs = self.conjunction()?;
                lhs = lhs.or(rhs);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn conjunction(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.clause()?;
        loop {
            self.skip_ws();
            if self.keyword("and") {
                let rhs = self.clause()?;
                lhs = lhs.and(rhs);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn clause(&mut self) -> Result<Expr, SyntaxError> {
        self.skip_ws();
        match self.peek() {
            None => Err(self.error("expected a clause, found end of input")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.skip_ws();
                if self.peek() != Some(b')') {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(_) => {
                let start = self.pos;
                let word = self.path_token()?;
                if word == "exists" {
                    let save = self.pos;
                    self.skip_ws();
                    if self.peek() == Some(b'(') {
                        self.pos += 1;
                        self.skip_ws();
                        let path = self.path()?;
                        self.skip_ws();
                        if self.peek() != Some(b')') {
                            return Err(self.error("expected `)` after exists path"));
                        }
                        self.pos += 1;
                        return Ok(Expr::Exists(path));
                    }
                    self.pos = save;
                }
                let path = Path::parse(word)
                    .ok_or_else(|| SyntaxError::new(start, format!("invalid path {word:?}")))?;
                self.skip_ws();
                let op = self.op()?;
                self.skip_ws();
                let literal = self.literal()?;
                Ok(Expr::Compare { path, op, literal })
            }
        }
    }

    fn path_token(&mut self) -> Result<&'a str, SyntaxError> {
        let start = self.pos;
        while matches!(self.peek(), Some(b) if is_path_byte(b)) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected a path"));
        }
        let src = self.src;
        Ok(&src[start..self.pos])
    }

    fn path(&mut self) -> Result<Path, SyntaxError> {
        let start = self.pos;
        let word = self.path_token()?;
        Path::parse(word).ok_or_else(|| SyntaxError::new(start, format!("invalid path {word:?}")))
    }

    fn op(&mut self) -> Result<CompareOp, SyntaxError> {
        let rest = &self.bytes()[self.pos..];
        let (op, len) = match rest {
            [b'=', b'=', ..] => (CompareOp::Eq, 2),
            [b'!', b'=', ..] => (CompareOp::Ne, 2),
            [b'<', b'=', ..] => (CompareOp::Le, 2),
            [b'>', b'=', ..] => (CompareOp::Ge, 2),
            [b'~', b'=', ..] => (CompareOp::Glob, 2),
            [b'<', ..] => (CompareOp::Lt, 1),
            [b'>', ..] => (CompareOp::Gt, 1),
            [] => return Err(self.error("expected an operator, found end of input")),
            _ => return Err(self.error("expected an operator")),
        };
        self.pos += len;
        Ok(op)
    }

    fn literal(&mut self) -> Result<Value, SyntaxError> {
        match self.peek() {
            None => Err(self.error("expected a literal, found end of input")),
            Some(b'"') => self.string_literal(),
            Some(b) if b == b'-' || b.is_ascii_digit() => self.number_literal(),
            Some(_) => {
                if self.keyword("true") {
                    Ok(Value::Bool(true))
                } else if self.keyword("false") {
                    Ok(Value::Bool(false))
                } else {
                    Err(self.error("expected a literal"))
                }
            }
        }
    }

    fn string_literal(&mut self) -> Result<Value, SyntaxError> {
        let start = self.pos;
        self.pos += 1;
        let mut out = String::new();
        let mut chars = self.src[self.pos..].char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos += i + 1;
                    return Ok(Value::Str(out));
                }
                '\\' => match chars.next() {
                    Some((_, e @ ('"' | '\\'))) => out.push(e),
                    Some((j, _)) => {
                        return Err(SyntaxError::new(self.pos + j, "invalid escape"));
                    }
                    None => break,
                },
                c => out.push(c),
            }
        }
        Err(SyntaxError::new(start, "unterminated string literal"))
    }

    fn number_literal(&mut self) -> Result<Value, SyntaxError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            let s = p.pos;
            while matches!(p.peek(), Some(b) if b.is_ascii_digit()) {
                p.pos += 1;
            }
            p.pos - s
        };
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        if digits(self) == 0 {
            return Err(self.error("expected digits"));
        }
        let mut is_float = false;
        if self.peek() == Some(b'.') {
            self.pos += 1;
            is_float = true;
            if digits(self) == 0 {
                return Err(self.error("expected digits after `.`"));
            }
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            self.pos += 1;
            is_float = true;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                return Err(self.error("expected exponent digits"));
            }
        }
        if matches!(self.peek(), Some(b) if is_path_byte(b)) {
            return Err(self.error("unexpected character in number"));
        }
        let text = &self.src[start..self.pos];
        let bad = || SyntaxError::new(start, format!("invalid number {text:?}"));
        if is_float {
            text.parse::<f64>()
                .ok()
                .filter(|f| f.is_finite())
                .map(Value::Float)
                .ok_or_else(bad)
        } else {
            text.parse::<i64>().map(Value::Int).map_err(|_| bad())
        }
    }
}

/// Runs `query` over `hosts`, returning projected copies of matching live
/// hosts sorted by (cluster, host id). Stale samples are dropped from the
/// returned records.
pub fn evaluate<'a, I>(hosts: I, query: &Query, now: Epoch) -> Vec<HostRecord>
where
    I: IntoIterator<Item = &'a HostRecord>,
{
    let mut out: Vec<HostRecord> = hosts
        .into_iter()
        .filter(|h| h.is_live(now) && query.matches(h, now))
        .map(|h| project(h, &query.projection, now))
        .collect();
    out.sort_by(|a, b| (&a.cluster, &a.host_id).cmp(&(&b.cluster, &b.host_id)));
    out
}

/// Fresh samples of `host`, restricted to `projection` when non-empty.
pub fn project(host: &HostRecord, projection: &[String], now: Epoch) -> HostRecord {
    let mut rec = host.fresh_only(now);
    if !projection.is_empty() {
        rec.samples
            .retain(|name, _| projection.iter().any(|p| p == name));
    }
    rec
}
