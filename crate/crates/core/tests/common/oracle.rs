//! Brute-force reference implementations, written from the contracts
//! rather than from the library code.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use campus_discovery::model::{Epoch, HostRecord, MetricSample, Value};

/// Query tree built by the generators and printed to text for the parser.
#[derive(Debug, Clone)]
pub enum QExpr {
    And(Box<QExpr>, Box<QExpr>),
    Or(Box<QExpr>, Box<QExpr>),
    Cmp(String, &'static str, Lit),
    Exists(String),
}

#[derive(Debug, Clone)]
pub enum Lit {
    S(String),
    I(i64),
    F(f64),
    B(bool),
}

fn print_lit(l: &Lit) -> String {
    match l {
        Lit::S(s) => {
            let mut out = String::from("\"");
            for c in s.chars() {
                if c == '"' || c == '\\' {
                    out.push('\\');
                }
                out.push(c);
            }
            out.push('"');
            out
        }
        Lit::I(i) => i.to_string(),
        Lit::F(f) => format!("{f:?}"),
        Lit::B(b) => b.to_string(),
    }
}

/// Prints with the fewest parentheses the precedence rules allow.
pub fn print(e: &QExpr) -> String {
    match e {
        QExpr::Or(a, b) => format!("{} or {}", print(a), print(b)),
        QExpr::And(a, b) => {
            let side = |x: &QExpr| match x {
                QExpr::Or(..) => format!("({})", print(x)),
                _ => print(x),
            };
            format!("{} and {}", side(a), side(b))
        }
        QExpr::Cmp(p, op, l) => format!("{p} {op} {}", print_lit(l)),
        QExpr::Exists(p) => format!("exists({p})"),
    }
}

fn fresh(s: &MetricSample, now: Epoch) -> bool {
    (now as i128) - (s.collected_at as i128) <= s.ttl_seconds as i128
}

fn lookup(h: &HostRecord, path: &str, now: Epoch) -> Option<Value> {
    match path {
        "host.id" => Some(Value::Str(h.host_id.clone())),
        "host.cluster" => Some(Value::Str(h.cluster.clone())),
        p => h
            .samples
            .get(p)
            .filter(|s| fresh(s, now))
            .map(|s| s.value.clone()),
    }
}

fn float_text(f: f64) -> String {
    if f == 0.0 {
        "0".into()
    } else {
        format!("{f}")
    }
}

fn value_text(v: &Value) -> String {
    match v {
        Value::Str(s) => s.clone(),
        Value::Int(i) => i.to_string(),
        Value::Float(f) => float_text(*f),
        Value::Bool(b) => b.to_string(),
    }
}

fn lit_text(l: &Lit) -> String {
    match l {
        Lit::S(s) => s.clone(),
        Lit::I(i) => i.to_string(),
        Lit::F(f) => float_text(*f),
        Lit::B(b) => b.to_string(),
    }
}

/// `*` matches any run, `?` one character, everything else itself.
pub fn glob_match(pattern: &[char], text: &[char]) -> bool {
    match pattern.split_first() {
        None => text.is_empty(),
        Some(('*', rest)) => (0..=text.len()).any(|i| glob_match(rest, &text[i..])),
        Some(('?', rest)) => !text.is_empty() && glob_match(rest, &text[1..]),
        Some((c, rest)) => text.first() == Some(c) && glob_match(rest, &text[1..]),
    }
}

fn ord_holds(op: &str, o: Ordering) -> bool {
    match op {
        "==" => o == Ordering::Equal,
        "!=" => o != Ordering::Equal,
        "<" => o == Ordering::Less,
        "<=" => o != Ordering::Greater,
        ">" => o == Ordering::Greater,
        ">=" => o != Ordering::Less,
        _ => unreachable!(),
    }
}

fn cmp(v: &Value, op: &str, l: &Lit) -> bool {
    if op == "~=" {
        let p: Vec<char> = lit_text(l).chars().collect();
        let t: Vec<char> = value_text(v).chars().collect();
        return glob_match(&p, &t);
    }
    let num = |v: &Value| match v {
        Value::Int(i) => Some(*i as f64),
        Value::Float(f) => Some(*f),
        _ => None,
    };
    match (v, l) {
        (Value::Int(a), Lit::I(b)) => ord_holds(op, a.cmp(b)),
        (Value::Str(a), Lit::S(b)) => ord_holds(op, a.as_bytes().cmp(b.as_bytes())),
        (Value::Bool(a), Lit::B(b)) => match op {
            "==" => a == b,
            "!=" => a != b,
            _ => false,
        },
        (Value::Int(_) | Value::Float(_), Lit::I(_) | Lit::F(_)) => {
            let x = num(v).unwrap();
            let y = match l {
                Lit::I(i) => *i as f64,
                Lit::F(f) => *f,
                _ => unreachable!(),
            };
            x.partial_cmp(&y).is_some_and(|o| ord_holds(op, o))
        }
        _ => false,
    }
}

pub fn eval(e: &QExpr, h: &HostRecord, now: Epoch) -> bool {
    match e {
        QExpr::And(a, b) => eval(a, h, now) && eval(b, h, now),
        QExpr::Or(a, b) => eval(a, h, now) || eval(b, h, now),
        QExpr::Exists(p) => lookup(h, p, now).is_some(),
        QExpr::Cmp(p, op, l) => lookup(h, p, now).is_some_and(|v| cmp(&v, op, l)),
    }
}

/// Linear scan: live hosts that satisfy `filter`, stale samples removed,
/// projected, ordered by (cluster, host id).
pub fn naive_query(
    hosts: &[HostRecord],
    filter: Option<&QExpr>,
    projection: &[String],
    now: Epoch,
) -> Vec<HostRecord> {
    let mut out = Vec::new();
    for h in hosts {
        if !h.samples.values().any(|s| fresh(s, now)) {
            continue;
        }
        if let Some(f) = filter {
            if !eval(f, h, now) {
                continue;
            }
        }
        let mut rec = h.clone();
        rec.samples.retain(|name, s| {
            fresh(s, now) && (projection.is_empty() || projection.contains(name))
        });
        out.push(rec);
    }
    out.sort_by(|a, b| {
        (a.cluster.as_bytes(), a.host_id.as_bytes())
            .cmp(&(b.cluster.as_bytes(), b.host_id.as_bytes()))
    });
    out
}

/// Fires for one (rule, host) over a trace of (cycle time, condition).
/// Scans for `sustain` consecutive trues; after a fire, evaluation resumes at
/// the first cycle at or past the cooldown end.
pub fn simulate_trigger(trace: &[(Epoch, bool)], sustain: usize, cooldown: u64) -> Vec<Epoch> {
    let mut fires = Vec::new();
    let mut i = 0;
    'outer: while i < trace.len() {
        let mut run = 0;
        while i < trace.len() {
            let (t, holds) = trace[i];
            run = if holds { run + 1 } else { 0 };
            i += 1;
            if run == sustain {
                fires.push(t);
                if cooldown > 0 {
                    while i < trace.len() && trace[i].0 < t + cooldown {
                        i += 1;
                    }
                }
                continue 'outer;
            }
        }
    }
    fires
}

/// Sequential merge of ingested views in commit order; heartbeat is the
/// ingest time.
pub fn replay_ingests(ingests: &[(u64, Vec<HostRecord>, Epoch)]) -> BTreeMap<String, HostRecord> {
    let mut ordered: Vec<&(u64, Vec<HostRecord>, Epoch)> = ingests.iter().collect();
    ordered.sort_by_key(|(v, _, _)| *v);
    let mut hosts: BTreeMap<String, HostRecord> = BTreeMap::new();
    for (_, view, now) in ordered {
        for h in view {
            let entry = hosts.entry(h.host_id.clone()).or_insert_with(|| {
                HostRecord::new(
                    h.host_id.clone(),
                    h.cluster.clone(),
                    h.agent_version.clone(),
                    0,
                )
            });
            for (name, s) in &h.samples {
                let keep_old = entry
                    .samples
                    .get(name)
                    .is_some_and(|o| o.collected_at > s.collected_at);
                if !keep_old {
                    entry.samples.insert(name.clone(), s.clone());
                }
            }
            entry.cluster = h.cluster.clone();
            entry.agent_version = h.agent_version.clone();
            entry.heartbeat_at = *now;
        }
    }
    hosts
}
