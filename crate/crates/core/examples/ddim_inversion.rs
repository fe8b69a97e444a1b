//! Invert a scene latent with DDIM and sample it back, printing how far
//! each intermediate state drifts and the final reconstruction error.
//!
//! `cargo run --example ddim_inversion -- [size]`

use relayout::backend::{ddim_invert_trace, ddim_sample, Denoiser, InversionConfig};
use relayout::pipeline::{layout_prompt, toy_backend};
use relayout::scene::demo_scene;

fn main() -> relayout::error::Result<()> {
    let size: u32 = std::env::args().nth(1).map_or(Ok(64), |s| s.parse()).expect("size");
    let scene = demo_scene(0, size);
    let d = toy_backend(0, &scene.layout, scene.image.dimensions())?;
    let (prompt, _) = layout_prompt(&scene.layout, None)?;
    let x0 = d.encode(&scene.image)?;

    let trace = ddim_invert_trace(&d, &x0, &prompt, 1.0, &InversionConfig::default())?;
    println!("prompt: {prompt}");
    for (t, state) in trace.states().iter().enumerate() {
        let rms = (state.data().mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt();
        println!("t={t:2} rms {rms:.4}");
    }
    for start in [5, 10, trace.last_step()] {
        let back = ddim_sample(&d, trace.get(start).expect("state"), start, &prompt)?;
        println!("sample from t={start:2}: max |x0 - x0'| = {:.3e}", back.max_abs_diff(&x0));
    }
    Ok(())
}
