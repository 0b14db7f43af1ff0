// An aggregator polling three fixture agents, queried over HTTP.

use std::error::Error;
use std::path::Path;
use std::time::Duration;

use campus_discovery::agent::{self, AgentConfig, CollectorBackend};
use campus_discovery::daemon::{AggregatorConfig, Daemon};
use campus_discovery::http::HostJson;
use campus_discovery::sources::SourceSpec;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/config/fixture.json");

fn agent_config(host: &str, cluster: &str) -> AgentConfig {
    AgentConfig {
        host_id: Some(host.into()),
        cluster: cluster.into(),
        collect_interval_seconds: 1,
        announce_target: None,
        listen_address: "127.0.0.1".into(),
        listen_port: 0,
        static_ttl_seconds: 600,
        dynamic_ttl_seconds: 30,
        collector_backend: CollectorBackend::Fixture(Path::new(FIXTURE).into()),
    }
}

pub async fn run() -> Result<(), Box<dyn Error>> {
    let daemon = Daemon::start(AggregatorConfig {
        http_listen: "127.0.0.1:0".into(),
        ..AggregatorConfig::default()
    })
    .await?;
    let base = daemon.base_url();
    let http = reqwest::Client::new();

    let mut agents = Vec::new();
    for (host, cluster) in [("node01", "lab"), ("node02", "lab"), ("node03", "north")] {
        let handle = agent::spawn(&agent_config(host, cluster)).await?;
        let spec = SourceSpec::pull(host, handle.local_addr.to_string(), 1, 120);
        let resp = http
            .post(format!("{base}/v1/sources"))
            .json(&spec)
            .send()
            .await?;
        println!("registered {host}: {}", resp.status());
        agents.push(handle);
    }

    while daemon.index().snapshot().host_count() < 3 {
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    println!(
        "{}",
        http.get(format!("{base}/v1/clusters"))
            .send()
            .await?
            .text()
            .await?
    );

    let body = serde_json::json!({ "q": r#"cluster == "lab" and cpu.count >= 2"#, "project": ["load.one", "mem.free_mb"] });
    let hosts: Vec<HostJson> = http
        .post(format!("{base}/v1/query"))
        .json(&body)
        .send()
        .await?
        .json()
        .await?;
    for h in &hosts {
        let metrics: Vec<String> = h
            .metrics
            .iter()
            .map(|(k, m)| format!("{k}={}", m.value))
            .collect();
        println!("{}/{} {}", h.cluster, h.host_id, metrics.join(" "));
    }

    let bad = http
        .post(format!("{base}/v1/query"))
        .json(&serde_json::json!({ "q": "cpu.count >" }))
        .send()
        .await?;
    println!("{} {}", bad.status(), bad.text().await?);

    for a in agents {
        a.shutdown();
    }
    daemon.shutdown();
    Ok(())
}

#[allow(dead_code)]
#[tokio::main]
async fn main() -> Result<(), Box<dyn Error>> {
    run().await
}
