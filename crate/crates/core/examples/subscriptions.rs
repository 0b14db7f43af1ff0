// Change notification: a standing query and the diffs it sees as the
// index moves through versions.

use std::error::Error;

use campus_discovery::index::Index;
use campus_discovery::model::{ClusterView, HostRecord, MetricKind, MetricSample, Value};
use campus_discovery::query::Query;
use campus_discovery::subscription::SubscriptionStore;

fn host(id: &str, load: f64, t: u64) -> HostRecord {
    HostRecord::new(id, "lab", "0.1.0", t).with_sample(
        MetricSample::new(
            "load.one",
            Value::Float(load),
            "",
            MetricKind::Dynamic,
            t,
            60,
        )
        .unwrap(),
    )
}

pub async fn run() -> Result<(), Box<dyn Error>> {
    let index = Index::new();
    let subs = SubscriptionStore::new(300);
    let busy = Query::parse("load.one > 0.9")?;
    let id = subs.subscribe(busy, &index.snapshot(), 100);
    println!("subscription {id}");

    let steps = [
        (110, vec![host("a", 0.2, 110), host("b", 0.95, 110)]),
        (120, vec![host("a", 0.97, 120), host("b", 0.99, 120)]),
        (130, vec![host("a", 0.3, 130)]),
    ];
    for (t, hosts) in steps {
        let mut view = ClusterView::new("lab", t);
        for h in hosts {
            view = view.with_host(h);
        }
        let version = index.ingest(&view, t);
        println!("version {version}:");
        for ev in subs.poll(&id, &index.snapshot(), t)? {
            println!("  {:?} {} matched={}", ev.kind, ev.host_id, ev.matched);
        }
    }
    // an unpolled subscription lapses
    println!("collected {} idle subscription(s)", subs.gc(130 + 301));
    Ok(())
}

#[allow(dead_code)]
#[tokio::main]
async fn main() -> Result<(), Box<dyn Error>> {
    run().await
}
