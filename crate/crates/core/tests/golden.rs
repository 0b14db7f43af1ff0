mod common;

use campus_discovery::model::{canonical_serialize, parse_index};
use campus_discovery::render::RenderEngine;

use common::{golden_server, golden_view, GOLDEN_NOW, GOLDEN_XML};

const VIEWS: [(&str, &[u8]); 4] = [
    ("index", include_bytes!("golden/view_index.html")),
    ("basic", include_bytes!("golden/view_basic.html")),
    ("processor", include_bytes!("golden/view_processor.html")),
    ("memory", include_bytes!("golden/view_memory.html")),
];

#[test]
fn golden_document_is_canonical() {
    let view = golden_view();
    assert_eq!(view.hosts.len(), 2);
    assert_eq!(canonical_serialize(&view), GOLDEN_XML);
}

#[test]
fn builtin_views_match_golden_files() {
    let engine = RenderEngine::builtin();
    let hosts: Vec<_> = golden_view().hosts.into_values().collect();
    for (name, want) in VIEWS {
        for _ in 0..5 {
            let got = engine.render(name, &hosts, GOLDEN_NOW).unwrap();
            assert_eq!(
                String::from_utf8(got).unwrap(),
                String::from_utf8_lossy(want),
                "view {name}"
            );
        }
    }
}

#[test]
fn host_order_does_not_change_output() {
    let engine = RenderEngine::builtin();
    let mut hosts: Vec<_> = golden_view().hosts.into_values().collect();
    hosts.reverse();
    assert_eq!(
        engine.render("processor", &hosts, GOLDEN_NOW).unwrap(),
        VIEWS[2].1
    );
}

#[tokio::test(flavor = "multi_thread")]
async fn served_views_match_golden_files() {
    let (daemon, _clock) = golden_server().await;
    let http = common::client();
    for (name, want) in VIEWS {
        let resp = http
            .get(format!("{}/v1/view/{name}", daemon.base_url()))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 200);
        assert!(resp.headers()["content-type"]
            .to_str()
            .unwrap()
            .starts_with("text/html"));
        assert_eq!(resp.bytes().await.unwrap(), want, "view {name}");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn served_index_document_holds_the_golden_cluster() {
    let (daemon, _clock) = golden_server().await;
    let body = common::client()
        .get(format!("{}/v1/index.xml", daemon.base_url()))
        .send()
        .await
        .unwrap()
        .bytes()
        .await
        .unwrap();
    let views = parse_index(&body).unwrap();
    assert_eq!(views, vec![golden_view()]);
    let text = String::from_utf8(body.to_vec()).unwrap();
    assert!(
        text.starts_with("<index>\n  <cluster name=\"lab\""),
        "{text}"
    );
}
