#![allow(dead_code)]

pub mod gen;
pub mod oracle;

use std::sync::Arc;

use campus_discovery::daemon::{AggregatorConfig, Daemon};
use campus_discovery::index::Index;
use campus_discovery::model::{
    parse, ClusterView, Epoch, HostRecord, MetricKind, MetricSample, Value,
};
use campus_discovery::trigger::{evaluate_cycle, Action, RuleSpec, RuleStates, TriggerRule};
use campus_discovery::FixedClock;
use proptest::test_runner::TestCaseError;

use gen::NOW;

pub const GOLDEN_NOW: Epoch = 1_250_000_000;
pub const GOLDEN_XML: &[u8] = include_bytes!("../golden/two_hosts.xml");

pub fn golden_view() -> ClusterView {
    parse(GOLDEN_XML).expect("golden document parses")
}

pub fn local_config() -> AggregatorConfig {
    AggregatorConfig {
        http_listen: "127.0.0.1:0".into(),
        ..AggregatorConfig::default()
    }
}

/// A daemon frozen at the golden timestamp holding the golden index.
pub async fn golden_server() -> (Daemon, Arc<FixedClock>) {
    let clock = Arc::new(FixedClock::new(GOLDEN_NOW));
    let daemon = Daemon::start_with_clock(local_config(), clock.clone())
        .await
        .expect("daemon starts");
    daemon.index().restore(&[golden_view()], GOLDEN_NOW);
    (daemon, clock)
}

pub fn client() -> reqwest::Client {
    reqwest::Client::new()
}

/// Polls `f` every 20 ms until it returns true or `timeout` passes.
pub async fn wait_until<F, Fut>(timeout: std::time::Duration, mut f: F) -> bool
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = bool>,
{
    let deadline = tokio::time::Instant::now() + timeout;
    loop {
        if f().await {
            return true;
        }
        if tokio::time::Instant::now() >= deadline {
            return false;
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
}

/// Writes `contents` to an executable shell script in `dir`.
pub fn script(dir: &std::path::Path, name: &str, contents: &str) -> std::path::PathBuf {
    use std::os::unix::fs::PermissionsExt;
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\n{contents}\n")).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

/// Runs one rule over per-host traces of load.one (None: metric absent)
/// and compares fire times with the brute-force simulator.
pub fn check_trigger_traces(
    traces: &[Vec<(u64, Option<bool>)>],
    sustain: u32,
    cooldown: u64,
) -> Result<(), TestCaseError> {
    let rule = TriggerRule::new(RuleSpec {
        id: "hot".into(),
        scope: String::new(),
        condition: "load.one > 0.9".into(),
        sustain_samples: sustain,
        cooldown_seconds: cooldown,
        action: Action::Log("{host}".into()),
        enabled: true,
    })
    .unwrap();
    let cycles = traces.iter().map(Vec::len).max().unwrap_or(0);
    // cycle i runs at NOW plus the sum of the widest gaps so far
    let mut times: Vec<Epoch> = Vec::new();
    let mut t = NOW;
    for i in 0..cycles {
        t += traces
            .iter()
            .filter_map(|tr| tr.get(i))
            .map(|(gap, _)| *gap)
            .max()
            .unwrap_or(1);
        times.push(t);
    }
    let mut states = RuleStates::new();
    let mut fired: Vec<Vec<Epoch>> = vec![Vec::new(); traces.len()];
    for (i, &now) in times.iter().enumerate() {
        let index = Index::new();
        let mut view = ClusterView::new("lab", now);
        for (h, tr) in traces.iter().enumerate() {
            let Some((_, v)) = tr.get(i) else { continue };
            let mut rec = HostRecord::new(format!("h{h}"), "lab", "1", now).with_sample(
                MetricSample::new(
                    "os.name",
                    Value::Str("Linux".into()),
                    "",
                    MetricKind::Static,
                    now,
                    3600,
                )
                .unwrap(),
            );
            if let Some(hot) = v {
                let load = if *hot { 0.95 } else { 0.5 };
                rec.insert(
                    MetricSample::new(
                        "load.one",
                        Value::Float(load),
                        "",
                        MetricKind::Dynamic,
                        now,
                        60,
                    )
                    .unwrap(),
                );
            }
            view = view.with_host(rec);
        }
        index.ingest(&view, now);
        for f in evaluate_cycle(
            std::slice::from_ref(&rule),
            &index.snapshot(),
            &mut states,
            now,
        ) {
            let h: usize = f.host[1..].parse().unwrap();
            fired[h].push(f.fired_at);
        }
    }
    for (h, tr) in traces.iter().enumerate() {
        let trace: Vec<(Epoch, bool)> = tr
            .iter()
            .zip(&times)
            .map(|((_, v), t)| (*t, *v == Some(true)))
            .collect();
        let want = oracle::simulate_trigger(&trace, sustain as usize, cooldown);
        proptest::prop_assert_eq!(&fired[h], &want, "host {} trace {:?}", h, trace);
    }
    Ok(())
}

pub const FIXTURE_JSON: &str = r#"{
  "static": [
    {"name": "os.name", "type": "string", "value": "Linux"},
    {"name": "cpu.count", "type": "int", "value": 4}
  ],
  "dynamic": [
    {"name": "load.one", "type": "float", "sequence": [0.5, 0.95]},
    {"name": "mem.free_mb", "type": "int", "sequence": [900, 850, 800], "units": "MB"}
  ]
}"#;

/// Loopback fixture agent config; writes the fixture next to it.
pub fn fixture_agent(
    dir: &std::path::Path,
    host_id: &str,
    cluster: &str,
    ttl: u64,
    announce_target: Option<String>,
) -> campus_discovery::agent::AgentConfig {
    let fixture = dir.join("fixture.json");
    if !fixture.exists() {
        std::fs::write(&fixture, FIXTURE_JSON).unwrap();
    }
    campus_discovery::agent::AgentConfig {
        host_id: Some(host_id.to_owned()),
        cluster: cluster.to_owned(),
        collect_interval_seconds: 1,
        announce_target,
        listen_address: "127.0.0.1".into(),
        listen_port: 0,
        static_ttl_seconds: ttl,
        dynamic_ttl_seconds: ttl,
        collector_backend: campus_discovery::agent::CollectorBackend::Fixture(fixture),
    }
}

/// A one-host cluster document.
pub fn one_host_xml(cluster: &str, host: &str, load: f64, t: Epoch) -> Vec<u8> {
    let view = ClusterView::new(cluster, t).with_host(
        HostRecord::new(host, cluster, "0.1.0", t).with_sample(
            MetricSample::new(
                "load.one",
                Value::Float(load),
                "",
                MetricKind::Dynamic,
                t,
                3600,
            )
            .unwrap(),
        ),
    );
    campus_discovery::model::canonical_serialize(&view)
}
