//! Proptest strategies for views, indexes and queries.

use proptest::prelude::*;

use campus_discovery::model::{ClusterView, Epoch, HostRecord, MetricKind, MetricSample, Value};

use super::oracle::{Lit, QExpr};

pub const NOW: Epoch = 1_000_000;

pub const METRICS: &[&str] = &[
    "cpu.count",
    "load.one",
    "os.name",
    "mem.free_mb",
    "gpu.present",
    "disk.free_mb",
];

const STRINGS: &[&str] = &[
    "Linux",
    "Windows",
    "linux",
    "Lin",
    "",
    "a b",
    "x\"y",
    "back\\slash",
    "Zeta",
    "é",
];

fn any_value() -> impl Strategy<Value = Value> {
    prop_oneof![
        prop::sample::select(STRINGS).prop_map(|s| Value::Str(s.to_owned())),
        prop_oneof![(-4i64..5), Just(i64::MAX), Just(i64::MIN), Just(1024)].prop_map(Value::Int),
        prop_oneof![
            Just(0.5),
            Just(0.95),
            Just(2.0),
            Just(-3.25),
            Just(1e20),
            Just(1.5e-7),
            (-40i32..40).prop_map(|x| x as f64 / 8.0)
        ]
        .prop_map(Value::Float),
        any::<bool>().prop_map(Value::Bool),
    ]
}

fn any_kind() -> impl Strategy<Value = MetricKind> {
    prop_oneof![Just(MetricKind::Static), Just(MetricKind::Dynamic)]
}

/// Samples around [`NOW`]: roughly a third are stale.
fn sample_near_now(name: &'static str) -> impl Strategy<Value = MetricSample> {
    (any_value(), any_kind(), 0u64..20, 1u64..15).prop_map(move |(v, kind, age, ttl)| {
        MetricSample::new(name, v, "", kind, NOW - age, ttl).unwrap()
    })
}

fn host_near_now(id: String, cluster: String) -> impl Strategy<Value = HostRecord> {
    let picks: Vec<_> = METRICS
        .iter()
        .map(|m| prop::option::weighted(0.7, sample_near_now(m)))
        .collect();
    picks.prop_map(move |samples| {
        let mut h = HostRecord::new(id.clone(), cluster.clone(), "0.1.0", NOW);
        for s in samples.into_iter().flatten() {
            h.insert(s);
        }
        h
    })
}

/// 1..max_hosts hosts with unique ids spread over three clusters.
pub fn query_hosts(max_hosts: usize) -> impl Strategy<Value = Vec<HostRecord>> {
    prop::collection::vec(
        prop::sample::select(&["lab", "north", "south"][..]),
        1..max_hosts,
    )
    .prop_flat_map(|clusters| {
        clusters
            .into_iter()
            .enumerate()
            .map(|(i, c)| host_near_now(format!("h{i:02}"), c.to_owned()))
            .collect::<Vec<_>>()
    })
}

/// Groups hosts into views keyed by their cluster.
pub fn views_of(hosts: &[HostRecord], generated_at: Epoch) -> Vec<ClusterView> {
    let mut views: std::collections::BTreeMap<String, ClusterView> = Default::default();
    for h in hosts {
        views
            .entry(h.cluster.clone())
            .or_insert_with(|| ClusterView::new(h.cluster.clone(), generated_at))
            .hosts
            .insert(h.host_id.clone(), h.clone());
    }
    views.into_values().collect()
}

fn glob_pattern() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            3 => prop::sample::select(&["L", "in", "ux", "W", "1", "0", ".", "5", "tr", "e"][..]).prop_map(str::to_owned),
            1 => Just("?".to_owned()),
            1 => Just("*".to_owned()),
        ],
        0..5,
    )
    .prop_map(|parts| {
        let mut s = String::new();
        for p in parts {
            if !(p == "*" && s.ends_with('*')) {
                s.push_str(&p);
            }
        }
        s
    })
}

fn literal() -> impl Strategy<Value = Lit> {
    any_value().prop_map(|v| match v {
        Value::Str(s) => Lit::S(s),
        Value::Int(i) => Lit::I(i),
        Value::Float(f) => Lit::F(f),
        Value::Bool(b) => Lit::B(b),
    })
}

fn path() -> impl Strategy<Value = String> {
    prop_oneof![
        8 => prop::sample::select(METRICS).prop_map(str::to_owned),
        1 => Just("host.id".to_owned()),
        1 => Just("host.cluster".to_owned()),
        1 => Just("never.reported".to_owned()),
    ]
}

fn clause() -> impl Strategy<Value = QExpr> {
    prop_oneof![
        4 => (path(), prop::sample::select(&["==", "!=", "<", "<=", ">", ">="][..]), literal())
            .prop_map(|(p, op, l)| QExpr::Cmp(p, op, l)),
        1 => (path(), glob_pattern()).prop_map(|(p, g)| QExpr::Cmp(p, "~=", Lit::S(g))),
        1 => (path(), prop_oneof![(-2i64..3).prop_map(Lit::I), Just(Lit::F(0.5))])
            .prop_map(|(p, l)| QExpr::Cmp(p, "~=", l)),
        1 => path().prop_map(QExpr::Exists),
    ]
}

pub fn query_expr() -> impl Strategy<Value = QExpr> {
    clause().prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| QExpr::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner).prop_map(|(a, b)| QExpr::Or(Box::new(a), Box::new(b))),
        ]
    })
}

pub fn projection() -> impl Strategy<Value = Vec<String>> {
    prop_oneof![
        3 => Just(Vec::new()),
        1 => prop::collection::vec(prop::sample::select(METRICS).prop_map(str::to_owned), 1..3),
    ]
}

// --- canonical round-trip views ---------------------------------------

fn xml_text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 <>&\"'\t\n\r._:/#é中-]{0,12}"
}

fn metric_name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,5}(\\.[a-z0-9_]{1,5}){0,2}"
}

fn roundtrip_value() -> impl Strategy<Value = Value> {
    prop_oneof![
        xml_text().prop_map(Value::Str),
        any::<i64>().prop_map(Value::Int),
        any::<f64>()
            .prop_filter("finite", |f| f.is_finite())
            .prop_map(Value::Float),
        any::<bool>().prop_map(Value::Bool),
    ]
}

fn roundtrip_sample() -> impl Strategy<Value = MetricSample> {
    (
        metric_name(),
        roundtrip_value(),
        xml_text(),
        any_kind(),
        any::<u32>(),
        1u64..=u32::MAX as u64,
    )
        .prop_map(|(n, v, u, k, t, ttl)| MetricSample::new(n, v, u, k, t as Epoch, ttl).unwrap())
}

pub fn cluster_view() -> impl Strategy<Value = ClusterView> {
    (
        "[a-z][a-z0-9-]{0,8}",
        any::<u32>(),
        prop::collection::btree_map(
            "[A-Za-z0-9][A-Za-z0-9._-]{0,10}",
            (
                xml_text(),
                any::<u32>(),
                prop::collection::vec(roundtrip_sample(), 0..6),
            ),
            0..5,
        ),
    )
        .prop_map(|(name, gen_at, hosts)| {
            let mut view = ClusterView::new(name.clone(), gen_at as Epoch);
            for (id, (ver, hb, samples)) in hosts {
                let mut h = HostRecord::new(id, name.clone(), ver, hb as Epoch);
                for s in samples {
                    h.insert(s);
                }
                view = view.with_host(h);
            }
            view
        })
}
