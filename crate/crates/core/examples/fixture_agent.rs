// A node agent replaying a fixture: collect a few times, then pull the
// served document over TCP the way the aggregator does.

use std::error::Error;
use std::path::Path;
use std::time::Duration;

use campus_discovery::agent::{self, Agent, AgentConfig, FixtureCollector, FixtureDocument, Ttls};
use campus_discovery::aggregator::poll_source;
use campus_discovery::sources::SourceKind;

const CONFIG_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/config");

pub async fn run() -> Result<(), Box<dyn Error>> {
    let doc = FixtureDocument::load(&Path::new(CONFIG_DIR).join("fixture.json"))?;
    let ttls = Ttls {
        static_seconds: 600,
        dynamic_seconds: 30,
    };
    let agent = Agent::new("node01", "lab", ttls, Box::new(FixtureCollector::new(doc)));
    for t in 1_000..1_003 {
        agent.collect_now(t);
        let rec = agent.latest_record().expect("collected");
        println!("t={t} load.one={}", rec.samples["load.one"].value);
    }
    println!("{}", String::from_utf8_lossy(&agent.serve_snapshot()?));

    // the same fixture behind a real listener
    let mut config = AgentConfig::load(&Path::new(CONFIG_DIR).join("fixture-agent.json"))?;
    config.listen_port = 0;
    let handle = agent::spawn(&config).await?;
    tokio::time::sleep(Duration::from_millis(100)).await;
    let kind = SourceKind::Pull {
        address: handle.local_addr.to_string(),
    };
    let view = poll_source(&kind, Duration::from_secs(2)).await?;
    println!(
        "pulled {} host(s) of cluster {} from {}",
        view.hosts.len(),
        view.name,
        handle.local_addr
    );
    handle.shutdown();
    Ok(())
}

#[allow(dead_code)]
#[tokio::main]
async fn main() -> Result<(), Box<dyn Error>> {
    run().await
}
