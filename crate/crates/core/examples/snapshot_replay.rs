// Periodic snapshot frames and an offline query against an older one.

use std::error::Error;

use campus_discovery::daemon::{capture, restore_frame};
use campus_discovery::index::Index;
use campus_discovery::model::{ClusterView, HostRecord, MetricKind, MetricSample, Value};
use campus_discovery::persistence::FrameStore;
use campus_discovery::query::{evaluate, Query};

pub async fn run() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let store = FrameStore::open(dir.path(), 3_600)?;
    let live = Index::new();

    for (i, t) in [1_000u64, 1_060, 1_120].into_iter().enumerate() {
        let mut view = ClusterView::new("lab", t);
        for h in 0..=i {
            let load = 0.3 * (h + 1) as f64;
            view = view.with_host(
                HostRecord::new(format!("node{h:02}"), "lab", "0.1.0", t).with_sample(
                    MetricSample::new(
                        "load.one",
                        Value::Float(load),
                        "",
                        MetricKind::Dynamic,
                        t,
                        120,
                    )?,
                ),
            );
        }
        live.ingest(&view, t);
        if let Some(frame) = capture(&store, &live, t)? {
            println!(
                "captured {} ({} bytes)",
                frame.file_name()?,
                frame.bytes.len()
            );
        }
    }

    let frame = store.at_or_before(1_100)?;
    println!(
        "replaying frame at {} (version {})",
        frame.captured_at, frame.version
    );
    let past = Index::new();
    restore_frame(&past, &frame, frame.captured_at)?;
    let q = Query::parse("load.one >= 0.5")?;
    let snapshot = past.snapshot();
    for h in evaluate(snapshot.hosts(), &q, frame.captured_at) {
        println!("  {} load.one={}", h.host_id, h.samples["load.one"].value);
    }
    assert_eq!(past.snapshot().to_xml(), frame.bytes);
    Ok(())
}

#[allow(dead_code)]
#[tokio::main]
async fn main() -> Result<(), Box<dyn Error>> {
    run().await
}
