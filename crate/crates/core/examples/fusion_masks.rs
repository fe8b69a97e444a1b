//! Print which branch owns each latent cell when two target boxes overlap.
//! The later object in the layout wins the overlap.
//!
//! `cargo run --example fusion_masks`

use relayout::async_editor::fusion_assignment;
use relayout::scene::{demo_scene, translate_object};

fn main() -> relayout::error::Result<()> {
    let scene = demo_scene(0, 128);
    // push the cat into the pot's box
    let target = translate_object(&scene.layout, "cat", 40, 38)?;
    let (h, w) = (16, 16);
    let masks: Vec<_> = (0..target.objects.len()).map(|i| target.mask_at(i, h, w)).collect();
    let owner = fusion_assignment(&masks, (h, w))?;
    for (i, o) in target.objects.iter().enumerate() {
        println!("{i} = {}", o.id);
    }
    println!(". = base");
    for row in owner.rows() {
        let line: String = row.iter().map(|c| c.map_or('.', |i| char::from(b'0' + i as u8))).collect();
        println!("{line}");
    }
    Ok(())
}
