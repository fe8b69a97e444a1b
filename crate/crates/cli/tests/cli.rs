use std::path::Path;
use std::process::{Command, Output};

use relayout::scene::{demo_scene, translate_object, write_job};

fn relayout(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relayout"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn job(dir: &Path, dx: i64) -> std::path::PathBuf {
    let scene = demo_scene(1, 64);
    let target = translate_object(&scene.layout, "cat", dx, 0).unwrap();
    let spec = write_job(dir, &scene, &target).unwrap();
    let path = dir.join("job.json");
    std::fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn edit_then_reproduce_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    job(dir.path(), 26);
    let d = dir.path();
    let out = d.join("edited.png");
    let o = relayout(&[
        "edit",
        "--image", s(&d.join("source.png")),
        "--layout", s(&d.join("source.json")),
        "--target", s(&d.join("target.json")),
        "--out", s(&out),
        "--eta", "3",
        "--seed", "4",
        "--init", "lfin",
        "--no-projection",
        "--telemetry", s(&d.join("telemetry.csv")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("cat: region loss"), "{stdout}");
    assert!(out.is_file() && d.join("telemetry.csv").is_file());

    let manifest = d.join("edited.manifest.json");
    let o = relayout(&["reproduce", "--manifest", s(&manifest), "--out", s(&d.join("again.png"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("matches"));

    let report = d.join("report.json");
    // score a copy in a root that holds only this case
    let root = tempfile::tempdir().unwrap();
    let case = root.path().join("case");
    std::fs::create_dir(&case).unwrap();
    for f in std::fs::read_dir(d).unwrap() {
        let f = f.unwrap().path();
        if f.extension().is_some_and(|e| e == "png" || e == "json") {
            std::fs::copy(&f, case.join(f.file_name().unwrap())).unwrap();
        }
    }
    let o = relayout(&["eval", "--cases", s(root.path()), "--out", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["cases"].as_array().unwrap().len(), 1);
    assert_eq!(json["alignment"]["attention"]["count"], 1);
}

#[test]
fn validation_failures_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = job(dir.path(), 26);
    let o = relayout(&["validate", "--spec", s(&spec)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let mut target: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("target.json")).unwrap()).unwrap();
    target["objects"][0]["id"] = "dog".into();
    std::fs::write(dir.path().join("target.json"), target.to_string()).unwrap();
    let o = relayout(&["validate", "--spec", s(&spec)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("id_mismatch"));
    let o = relayout(&["edit", "--spec", s(&spec)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn backend_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let spec = job(dir.path(), 26);
    let o = relayout(&["edit", "--spec", s(&spec), "--backend", "adapter:missing"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no adapter named `missing`"));
}

#[test]
fn learn_concepts_writes_a_bundle() {
    let dir = tempfile::tempdir().unwrap();
    job(dir.path(), 26);
    let cfg = dir.path().join("concepts.json");
    std::fs::write(&cfg, r#"{ "stage1_steps": 10, "stage2_steps": 5 }"#).unwrap();
    let out = dir.path().join("bundle");
    let o = relayout(&[
        "learn-concepts",
        "--image", s(&dir.path().join("source.png")),
        "--layout", s(&dir.path().join("source.json")),
        "--config", s(&cfg),
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("cat -> <cat>"));
    assert!(out.join("manifest.json").is_file());
}
