//! Run a few edits into case directories and score them with the batch
//! evaluation harness.
//!
//! `cargo run --example batch_eval -- [cases-dir]`

use relayout::evaluation::{evaluate_dir, HashEmbedder};
use relayout::pipeline::{edit_layout, Backends, CancelToken};
use relayout::scene::{demo_scene, translate_object, write_job};

fn main() -> relayout::error::Result<()> {
    let root = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "eval-cases".into()));
    for (i, dx) in [30i64, 40, 50].into_iter().enumerate() {
        let scene = demo_scene(i as u64, 128);
        let target = translate_object(&scene.layout, "cat", dx, 0)?;
        let mut spec = write_job(&root.join(format!("case{i}")), &scene, &target)?;
        spec.options.guidance.eta = 3.0;
        spec.options.projection.enabled = false;
        edit_layout(&spec, &Backends::default(), &mut (), &CancelToken::default())?;
    }
    let report = evaluate_dir(&root, Some(&HashEmbedder::default()))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
