// Built-in views and a custom template rendered over a cluster document.

use std::error::Error;

use campus_discovery::model::parse;
use campus_discovery::render::{RenderEngine, Template};

const DOC: &[u8] = include_bytes!("../tests/golden/two_hosts.xml");

const CUSTOM: &str = "\
<ul>
{{#each hosts}}  <li>{{host.id}}: {{cpu.model}}{{#if load.one > 0.9}} (busy){{/if}}</li>
{{/each}}</ul>
";

pub async fn run() -> Result<(), Box<dyn Error>> {
    let view = parse(DOC)?;
    let hosts: Vec<_> = view.hosts.values().cloned().collect();
    let engine = RenderEngine::builtin();
    let out = std::env::temp_dir().join("campus-discovery-views");
    std::fs::create_dir_all(&out)?;
    let names: Vec<String> = engine.names().map(str::to_owned).collect();
    for name in names {
        let html = engine.render(&name, &hosts, view.generated_at)?;
        let path = out.join(format!("{name}.html"));
        std::fs::write(&path, &html)?;
        println!("{name}: {} bytes -> {}", html.len(), path.display());
    }

    let custom = Template::compile("busy", CUSTOM)?;
    print!(
        "{}",
        String::from_utf8(custom.render(&hosts, view.generated_at))?
    );

    match Template::compile("broken", "{{#each hosts}}\n{{/if}}") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}

#[allow(dead_code)]
#[tokio::main]
async fn main() -> Result<(), Box<dyn Error>> {
    run().await
}
