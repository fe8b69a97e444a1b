//! Learn one concept per object of a synthetic scene, save the bundle and
//! load it into a fresh toy backend.
//!
//! `cargo run --example learn_concepts -- [bundle-dir]`

use relayout::backend::Denoiser;
use relayout::concept_learning::{
    evaluate_masked_loss, learn_stage1_embeddings, learn_stage2_finetune, load_bundle, prepare_concepts,
    save_bundle, ConceptConfig,
};
use relayout::pipeline::toy_backend;
use relayout::scene::demo_scene;

fn main() -> relayout::error::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "concepts".into());
    let scene = demo_scene(2, 64);
    let mut d = toy_backend(0, &scene.layout, scene.image.dimensions())?;
    let latent = d.encode(&scene.image)?;
    let config = ConceptConfig {
        stage1_steps: 100,
        stage2_steps: 100,
        ..ConceptConfig::default()
    };

    let (mut bundle, data) = prepare_concepts(&mut d, &latent, &scene.layout, &config)?;
    let before = evaluate_masked_loss(&d, &data, None, 1, 16)?;
    learn_stage1_embeddings(&mut d, &mut bundle, &data)?;
    let mid = evaluate_masked_loss(&d, &data, None, 1, 16)?;
    learn_stage2_finetune(&mut d, &mut bundle, &data)?;
    let after = evaluate_masked_loss(&d, &data, None, 1, 16)?;
    println!("masked loss {before:.4} -> {mid:.4} (embeddings) -> {after:.4} (weights)");

    save_bundle(&bundle, out.as_ref())?;
    let loaded = load_bundle(out.as_ref(), Some(&d.backend_id()))?;
    let mut fresh = toy_backend(0, &scene.layout, scene.image.dimensions())?;
    loaded.apply(&mut fresh)?;
    for c in &loaded.concepts {
        println!("{} -> {:?}", c.object_id, loaded.prompt_for(&c.object_id));
    }
    println!("bundle saved to {out}");
    Ok(())
}
