//! Run an edit with appearance projection and dump the region labels and
//! raw/corrected projection fields for every step.
//!
//! `cargo run --example projection_debug -- [out-dir]`

use relayout::backend::Denoiser;
use relayout::pipeline::{run_edit, toy_backend, CancelToken, EditOptions, EditRequest};
use relayout::scene::{demo_scene, translate_object};

fn main() -> relayout::error::Result<()> {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "projection-debug".into()));
    let scene = demo_scene(1, 128);
    let target = translate_object(&scene.layout, "cat", 51, 0)?;
    let d = toy_backend(0, &scene.layout, scene.image.dimensions())?;
    let latent = d.encode(&scene.image)?;
    let mut options = EditOptions::default();
    options.guidance.eta = 3.0;

    let result = run_edit(
        &EditRequest {
            denoiser: &d,
            source_latent: &latent,
            source_image: Some(&scene.image),
            source_layout: &scene.layout,
            target_layout: &target,
            concepts: None,
            options: &options,
            debug_dir: Some(&dir),
        },
        &mut (),
        &CancelToken::default(),
    )?;
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .map_err(|e| relayout::error::Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    files.sort();
    println!("{} files in {}:", files.len(), dir.display());
    for f in files.iter().take(6) {
        println!("  {f}");
    }
    println!("  ...");
    println!("cells that fell back to the unrestricted match: {}", result.projection_fallbacks);
    println!("final losses {:?}", result.final_losses);
    Ok(())
}
