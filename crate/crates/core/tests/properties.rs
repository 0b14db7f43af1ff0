mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use campus_discovery::index::Index;
use campus_discovery::model::{
    canonical_serialize, merge, parse, parse_index, serialize_index, ClusterView, Epoch,
    HostRecord, MetricKind, MetricSample, Value,
};
use campus_discovery::persistence::{frame_file_name, FrameStore, SnapshotFrame, StoreError};
use campus_discovery::query::{parse_filter, Query};
use campus_discovery::sources::{SourceRegistry, SourceSpec};

use common::gen::{self, NOW};
use common::oracle::{self, QExpr};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn canonical_round_trip(view in gen::cluster_view()) {
        let bytes = canonical_serialize(&view);
        let back = parse(&bytes).unwrap();
        prop_assert_eq!(&back, &view);
        prop_assert_eq!(canonical_serialize(&back), bytes);
    }

    #[test]
    fn index_document_round_trip(views in prop::collection::btree_map("[a-z]{1,6}", gen::cluster_view(), 0..4)) {
        let views: Vec<ClusterView> = views
            .into_iter()
            .map(|(name, v)| {
                let mut out = ClusterView::new(name.clone(), v.generated_at);
                for mut h in v.hosts.into_values() {
                    h.host_id = format!("{name}-{}", h.host_id);
                    h.cluster = name.clone();
                    out = out.with_host(h);
                }
                out
            })
            .collect();
        let bytes = serialize_index(&views);
        prop_assert_eq!(parse_index(&bytes).unwrap(), views.clone());
        prop_assert_eq!(serialize_index(&parse_index(&bytes).unwrap()), bytes);
    }

    #[test]
    fn merge_is_associative_and_idempotent(
        a in samples_for("x"), b in samples_for("x"), c in samples_for("x"),
    ) {
        let left = merge(&merge(&a, &b).unwrap(), &c).unwrap();
        let right = merge(&a, &merge(&b, &c).unwrap()).unwrap();
        prop_assert_eq!(&left, &right);
        prop_assert_eq!(merge(&left, &left).unwrap(), left.clone());
        for (name, s) in &left.samples {
            let newest = [&a, &b, &c]
                .iter()
                .filter_map(|h| h.samples.get(name))
                .map(|s| s.collected_at)
                .max()
                .unwrap();
            prop_assert_eq!(s.collected_at, newest);
        }
    }

    #[test]
    fn merge_rejects_other_hosts(a in samples_for("x"), b in samples_for("y")) {
        prop_assert!(merge(&a, &b).is_err());
    }

    #[test]
    fn query_matches_linear_scan(
        hosts in gen::query_hosts(30),
        q in gen::query_expr(),
        projection in gen::projection(),
    ) {
        let text = oracle::print(&q);
        let query = Query::parse(&text).unwrap().with_projection(projection.clone()).unwrap();
        let got = campus_discovery::query::evaluate(&hosts, &query, NOW);
        let want = oracle::naive_query(&hosts, Some(&q), &projection, NOW);
        prop_assert_eq!(got, want, "query {}", text);
    }

    #[test]
    fn printed_queries_reparse_to_the_same_tree(q in gen::query_expr()) {
        let tree = parse_filter(&oracle::print(&q)).unwrap().unwrap();
        let again = parse_filter(&tree.to_string()).unwrap().unwrap();
        prop_assert_eq!(again, tree);
    }

    #[test]
    fn lease_expiry_matches_linear_scan(
        leases in prop::collection::vec((1u64..50, 0u64..50, prop::option::of(0u64..60)), 0..20),
        now in 0u64..120,
    ) {
        let mut reg = SourceRegistry::new();
        let mut expected = BTreeSet::new();
        for (i, (lifetime, registered, renewed)) in leases.iter().enumerate() {
            let id = format!("s{i}");
            reg.register(SourceSpec::push(&id, format!("c{i}"), *lifetime), *registered).unwrap();
            let mut expires = registered + lifetime;
            if let Some(t) = renewed.filter(|t| t >= registered) {
                match reg.renew(&id, t) {
                    Ok(r) => {
                        prop_assert!(t <= expires);
                        expires = t + lifetime;
                        prop_assert_eq!(r.lease_expires_at, expires);
                    }
                    Err(_) => {
                        prop_assert!(t > expires);
                        continue;
                    }
                }
            }
            if expires < now {
                expected.insert(id);
            }
        }
        let removed: BTreeSet<String> = reg.expire(now).into_iter().collect();
        prop_assert_eq!(removed, expected);
        prop_assert!(reg.expire(now).is_empty());
    }

    #[test]
    fn sweep_removes_exactly_the_all_stale_hosts(hosts in gen::query_hosts(30), dt in 0u64..20) {
        let index = Index::new();
        index.restore(&gen::views_of(&hosts, NOW), NOW);
        let now = NOW + dt;
        let want: BTreeSet<String> = hosts
            .iter()
            .filter(|h| h.samples.values().all(|s| now - s.collected_at > s.ttl_seconds))
            .map(|h| h.host_id.clone())
            .collect();
        let removed: BTreeSet<String> = index.sweep_stale(now).into_iter().collect();
        prop_assert_eq!(&removed, &want);
        let left: BTreeSet<String> = index.snapshot().hosts().map(|h| h.host_id.clone()).collect();
        prop_assert!(left.is_disjoint(&removed));
        prop_assert_eq!(left.len() + removed.len(), hosts.len());
    }

    #[test]
    fn trigger_counts_match_trace_simulator(
        traces in prop::collection::vec(
            prop::collection::vec((1u64..6, prop::option::weighted(0.9, prop::bool::weighted(0.6))), 1..40),
            1..3,
        ),
        sustain in 1u32..4,
        cooldown in prop_oneof![Just(0u64), 1u64..30],
    ) {
        common::check_trigger_traces(&traces, sustain, cooldown)?;
    }

    #[test]
    fn persistence_matches_directory_listing(
        ops in prop::collection::vec((0u64..200, 0u64..20), 1..25),
        retention in 10u64..300,
        range in (0u64..220, 0u64..220),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let store = FrameStore::open(dir.path(), retention).unwrap();
        let mut newest: Option<(Epoch, u64)> = None;
        for (t, v) in ops {
            let frame = SnapshotFrame::new(t, v, b"<index></index>\n".to_vec());
            let accepted = newest.is_none_or(|n| (t, v) > n);
            match store.store(&frame) {
                Ok(()) => {
                    prop_assert!(accepted);
                    newest = Some((t, v));
                }
                Err(StoreError::OutOfOrderFrame { .. }) => prop_assert!(!accepted),
                Err(e) => panic!("{e}"),
            }
        }
        // oracle: read the directory and filter names directly
        let mut listed: Vec<(Epoch, u64)> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .map(|name| {
                let (ts, rest) = name.split_once('_').unwrap();
                let t = chrono::DateTime::parse_from_rfc3339(ts).unwrap().timestamp() as Epoch;
                let v = rest.strip_suffix(".xml").unwrap().parse().unwrap();
                prop_assert_eq!(&frame_file_name(t, v).unwrap(), &name);
                Ok((t, v))
            })
            .collect::<Result<_, TestCaseError>>()?;
        listed.sort();
        let horizon = newest.map(|(t, _)| t.saturating_sub(retention)).unwrap_or(0);
        prop_assert!(listed.iter().all(|(t, _)| *t >= horizon));
        let (t0, t1) = (range.0.min(range.1), range.0.max(range.1));
        let want: Vec<(Epoch, u64)> = listed.iter().copied().filter(|(t, _)| (t0..=t1).contains(t)).collect();
        let got: Vec<(Epoch, u64)> = store
            .load_range(t0, t1)
            .unwrap()
            .frames
            .iter()
            .map(|f| (f.captured_at, f.version))
            .collect();
        prop_assert_eq!(got, want);
        match store.latest() {
            Ok(f) => prop_assert_eq!(Some((f.captured_at, f.version)), listed.last().copied()),
            Err(StoreError::NotFound) => prop_assert!(listed.is_empty()),
            Err(e) => panic!("{e}"),
        }
    }
}

fn samples_for(id: &'static str) -> impl Strategy<Value = HostRecord> {
    (
        0u64..10,
        prop::sample::select(&["lab", "other"][..]),
        prop::collection::vec(
            (prop::sample::select(gen::METRICS), 0u64..5, -3i64..3),
            0..6,
        ),
    )
        .prop_map(move |(hb, cluster, samples)| {
            let mut h = HostRecord::new(id, cluster, format!("v{hb}"), hb);
            for (name, at, v) in samples {
                h.insert(
                    MetricSample::new(name, Value::Int(v), "", MetricKind::Dynamic, at, 60)
                        .unwrap(),
                );
            }
            h
        })
}

#[test]
fn trigger_simulator_worked_examples() {
    let t = |xs: &[bool]| {
        xs.iter()
            .enumerate()
            .map(|(i, b)| (i as Epoch * 10, *b))
            .collect::<Vec<_>>()
    };
    assert_eq!(
        oracle::simulate_trigger(&t(&[false, true, true]), 2, 0),
        vec![20]
    );
    assert_eq!(
        oracle::simulate_trigger(&t(&[true, true, true, true]), 2, 1000),
        vec![10]
    );
    assert_eq!(
        oracle::simulate_trigger(&t(&[true, true, true, true]), 2, 0),
        vec![10, 30]
    );
    assert_eq!(
        oracle::simulate_trigger(&t(&[true, false, true, true]), 2, 0),
        vec![30]
    );
}

#[test]
fn glob_oracle_sanity() {
    let c = |s: &str| s.chars().collect::<Vec<_>>();
    assert!(oracle::glob_match(&c("L*"), &c("Linux")));
    assert!(oracle::glob_match(&c("?in*x"), &c("Linux")));
    assert!(!oracle::glob_match(&c("L?"), &c("Linux")));
}

#[test]
fn precedence_is_and_over_or() {
    let a = parse_filter("exists(a) or exists(b) and exists(c)")
        .unwrap()
        .unwrap();
    let b = parse_filter("exists(a) or (exists(b) and exists(c))")
        .unwrap()
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn concurrent_ingests_equal_sequential_replay() {
    let runner_cases = 32;
    let mut runner =
        proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(runner_cases));
    let strategy = prop::collection::vec(gen::query_hosts(6), 2..12);
    runner
        .run(&strategy, |batches| {
            let index = Arc::new(Index::new());
            let log = std::sync::Mutex::new(Vec::new());
            std::thread::scope(|s| {
                for (i, hosts) in batches.iter().enumerate() {
                    let index = index.clone();
                    let log = &log;
                    s.spawn(move || {
                        // same ids across batches so merges actually collide
                        let hosts: Vec<HostRecord> = hosts
                            .iter()
                            .map(|h| {
                                let mut h = h.clone();
                                h.cluster = "lab".into();
                                h
                            })
                            .collect();
                        let view = gen::views_of(&hosts, NOW).remove(0);
                        let v = index.ingest(&view, NOW + i as u64 % 2);
                        log.lock().unwrap().push((v, hosts, NOW + i as u64 % 2));
                    });
                }
            });
            let log = log.into_inner().unwrap();
            let versions: BTreeSet<u64> = log.iter().map(|e| e.0).collect();
            prop_assert_eq!(versions.len(), log.len());
            let want = oracle::replay_ingests(&log);
            let snapshot = index.snapshot();
            let got: std::collections::BTreeMap<String, HostRecord> = snapshot
                .hosts()
                .map(|h| (h.host_id.clone(), h.clone()))
                .collect();
            prop_assert_eq!(
                got.keys().collect::<Vec<_>>(),
                want.keys().collect::<Vec<_>>()
            );
            for (id, h) in &got {
                prop_assert_eq!(&h.samples, &want[id].samples);
            }
            prop_assert_eq!(snapshot.version, log.len() as u64);
            Ok(())
        })
        .unwrap();
}

#[test]
fn query_on_empty_filter_is_all_live_hosts() {
    let q: Option<&QExpr> = None;
    let hosts = vec![
        HostRecord::new("b", "lab", "1", 0).with_sample(
            MetricSample::new("x", Value::Int(1), "", MetricKind::Static, NOW, 10).unwrap(),
        ),
        HostRecord::new("a", "lab", "1", 0).with_sample(
            MetricSample::new("x", Value::Int(1), "", MetricKind::Static, NOW - 11, 10).unwrap(),
        ),
    ];
    let got = campus_discovery::query::evaluate(&hosts, &Query::parse("  ").unwrap(), NOW);
    assert_eq!(got, oracle::naive_query(&hosts, q, &[], NOW));
    assert_eq!(got.len(), 1);
}
