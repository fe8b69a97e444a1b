//! Move one object of a synthetic scene with the toy backend and print the
//! region loss before and after.
//!
//! `cargo run --example move_object -- [eta] [size] [init]`

use std::time::Instant;

use relayout::backend::Denoiser;
use relayout::noise_init::InitMode;
use relayout::pipeline::{run_edit, toy_backend, CancelToken, EditOptions, EditRequest, ProgressEvent};
use relayout::scene::{demo_scene, translate_object};

fn main() -> relayout::error::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let eta: f64 = args.first().map_or(Ok(3.0), |s| s.parse()).expect("eta");
    let size: u32 = args.get(1).map_or(Ok(128), |s| s.parse()).expect("size");
    let init = match args.get(2).map(String::as_str) {
        Some("lfin") => InitMode::Lfin,
        Some("inv") => InitMode::SourceInversion,
        _ => InitMode::Random,
    };

    let scene = demo_scene(1, size);
    let target = translate_object(&scene.layout, "cat", (size as f64 * 0.4) as i64, 0)?;
    let d = toy_backend(0, &scene.layout, scene.image.dimensions())?;
    let latent = d.encode(&scene.image)?;
    let mut options = EditOptions::default();
    options.guidance.eta = eta;
    options.init = init;

    let started = Instant::now();
    let mut events: Vec<ProgressEvent> = Vec::new();
    let result = run_edit(
        &EditRequest {
            denoiser: &d,
            source_latent: &latent,
            source_image: Some(&scene.image),
            source_layout: &scene.layout,
            target_layout: &target,
            concepts: None,
            options: &options,
            debug_dir: None,
        },
        &mut events,
        &CancelToken::default(),
    )?;
    for e in &events {
        if let ProgressEvent::Step { t, guided, losses, .. } = e {
            let l: Vec<String> = losses.iter().map(|o| format!("{}={:.4}", o.object_id, o.loss)).collect();
            println!("t={t:2} guided={guided} {}", l.join(" "));
        }
    }
    println!("prompt: {}", result.target_prompt);
    println!("initial {:?}", result.initial_losses);
    println!("final   {:?}", result.final_losses);
    println!("elapsed {:.2?}", started.elapsed());
    Ok(())
}
