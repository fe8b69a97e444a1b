//! Start the job service on a local port, submit a toy edit over HTTP and
//! follow its server-sent events until it finishes.
//!
//! `cargo run -p relayout-service --example submit_job`

use std::sync::Arc;

use futures::StreamExt;
use relayout::pipeline::Backends;
use relayout::scene::{demo_scene, translate_object, write_job};
use relayout_service::{serve_on, JobService, ServiceConfig};
use reqwest::multipart::{Form, Part};
use serde_json::{json, Value};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = tempfile::tempdir()?;
    let svc = JobService::start(ServiceConfig::new(data.path().join("service")), Backends::default())?;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base = format!("http://{}", listener.local_addr()?);
    tokio::spawn(serve_on(Arc::clone(&svc), listener));

    let inputs = data.path().join("inputs");
    let scene = demo_scene(1, 128);
    let target = translate_object(&scene.layout, "cat", 51, 0)?;
    write_job(&inputs, &scene, &target)?;
    let read = |n: &str| std::fs::read(inputs.join(n));
    let mut form = Form::new()
        .part("image", Part::bytes(read("source.png")?).file_name("source.png"))
        .part("source_layout", Part::bytes(read("source.json")?))
        .part("target_layout", Part::bytes(read("target.json")?))
        .text("config", json!({ "guidance": { "eta": 3.0 } }).to_string());
    for n in ["source_cat.png", "source_pot.png", "target_cat.png", "target_pot.png"] {
        form = form.part("mask", Part::bytes(read(n)?).file_name(n.to_string()));
    }

    let client = reqwest::Client::new();
    let created: Value = client.post(format!("{base}/api/jobs")).multipart(form).send().await?.json().await?;
    let id = created["id"].as_str().ok_or("no id")?.to_string();
    println!("submitted {id}");

    let mut body = client.get(format!("{base}/api/jobs/{id}/events")).send().await?.bytes_stream();
    let mut buf = String::new();
    'stream: while let Some(chunk) = body.next().await {
        buf.push_str(&String::from_utf8_lossy(&chunk?));
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            for data in block.lines().filter_map(|l| l.strip_prefix("data:")) {
                let event: Value = serde_json::from_str(data.trim())?;
                println!("{event}");
                if matches!(event["state"].as_str(), Some("DONE" | "FAILED" | "CANCELLED")) {
                    break 'stream;
                }
            }
        }
    }
    let record: Value = client.get(format!("{base}/api/jobs/{id}")).send().await?.json().await?;
    println!("state {} output {}", record["state"], record["output_hash"]);
    Ok(())
}
