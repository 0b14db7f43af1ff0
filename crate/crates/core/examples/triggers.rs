// Trigger rules from a rules file evaluated over a few index versions.

use std::error::Error;
use std::sync::Arc;

use campus_discovery::index::Index;
use campus_discovery::model::{ClusterView, HostRecord, MetricKind, MetricSample, Value};
use campus_discovery::trigger::{load_rules, TriggerService, TriggerStore};

const RULES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/config/rules.json");

pub async fn run() -> Result<(), Box<dyn Error>> {
    let rules = load_rules(&std::fs::read(RULES)?)?;
    let service = TriggerService::new(Arc::new(TriggerStore::new(rules)), None);
    let index = Index::new();

    let trace = [(0.5, 812), (0.95, 640), (0.97, 512), (0.4, 512)];
    for (cycle, (load, free)) in trace.into_iter().enumerate() {
        let t = 1_000 + cycle as u64 * 10;
        let rec = HostRecord::new("node01", "lab", "0.1.0", t)
            .with_sample(MetricSample::new(
                "os.name",
                Value::Str("Linux".into()),
                "",
                MetricKind::Static,
                t,
                600,
            )?)
            .with_sample(MetricSample::new(
                "load.one",
                Value::Float(load),
                "",
                MetricKind::Dynamic,
                t,
                60,
            )?)
            .with_sample(MetricSample::new(
                "mem.free_mb",
                Value::Int(free),
                "MB",
                MetricKind::Dynamic,
                t,
                60,
            )?);
        index.ingest(&ClusterView::new("lab", t).with_host(rec), t);
        let fired = service.run_cycle(&index.snapshot(), t).await;
        println!("cycle {}: load.one={load} mem.free_mb={free}", cycle + 1);
        for f in fired {
            println!("  {} -> {}", f.rule, f.message.unwrap_or_default());
        }
    }
    println!("{}", serde_json::to_string_pretty(&service.recent())?);
    Ok(())
}

#[allow(dead_code)]
#[tokio::main]
async fn main() -> Result<(), Box<dyn Error>> {
    run().await
}
