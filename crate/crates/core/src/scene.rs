//! Small synthetic scenes for demos and tests: a textured background with a
//! disc and a box on it, their layout, and helpers to move objects around.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::layout::{LayoutObject, LayoutSpec};
use crate::pipeline::{BackendSelector, EditJobSpec, EditOptions, Finding};
use crate::rng::substream;

#[derive(Clone, Debug)]
pub struct Scene {
    pub image: RgbImage,
    pub layout: LayoutSpec,
}

/// `size × size` scene with a `cat` disc at the upper left and a `pot` box
/// at the lower right. `seed` only drives the background texture.
pub fn demo_scene(seed: u64, size: u32) -> Scene {
    let s = size as f64;
    let n = size as usize;
    let (cx, cy, r) = (0.3 * s, 0.32 * s, 0.16 * s);
    let disc = Array2::from_shape_fn((n, n), |(y, x)| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        dx * dx + dy * dy <= r * r
    });
    let (b0, b1) = ((0.55 * s) as usize, (0.85 * s) as usize);
    let rect = Array2::from_shape_fn((n, n), |(y, x)| (b0..b1).contains(&y) && (b0..b1).contains(&x));

    let mut rng = substream(seed, "scene");
    let mut image = RgbImage::new(size, size);
    for (x, y, px) in image.enumerate_pixels_mut() {
        let (u, v) = (x as f64 / s, y as f64 / s);
        let jitter: f64 = rng.random_range(-12.0..12.0);
        let base = [60.0 + 80.0 * v, 110.0 + 60.0 * u, 150.0 - 40.0 * v];
        let (xi, yi) = (x as usize, y as usize);
        let rgb = if rect[[yi, xi]] {
            let stripe = if (xi / 3) % 2 == 0 { 25.0 } else { -25.0 };
            [120.0 + stripe, 50.0, 150.0 + stripe]
        } else if disc[[yi, xi]] {
            [235.0, 140.0 - 60.0 * v, 40.0]
        } else {
            base
        };
        *px = Rgb(rgb.map(|c| (c + jitter).clamp(0.0, 255.0) as u8));
    }
    let layout = LayoutSpec {
        width: size,
        height: size,
        objects: vec![
            LayoutObject {
                id: "cat".into(),
                token: "cat".into(),
                mask: disc,
                declared_bbox: None,
            },
            LayoutObject {
                id: "pot".into(),
                token: "pot".into(),
                mask: rect,
                declared_bbox: None,
            },
        ],
    };
    Scene { image, layout }
}

/// Shift an object's mask by `(dx, dy)` pixels, clipping at the borders.
pub fn translate_object(layout: &LayoutSpec, id: &str, dx: i64, dy: i64) -> Result<LayoutSpec> {
    let mut out = layout.clone();
    let obj = out
        .objects
        .iter_mut()
        .find(|o| o.id == id)
        .ok_or_else(|| Error::validation(Finding::error("unknown_object", format!("no object `{id}`")).for_object(id)))?;
    let (h, w) = obj.mask.dim();
    let old = obj.mask.clone();
    obj.mask = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = (y as i64 - dy, x as i64 - dx);
        sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w && old[[sy as usize, sx as usize]]
    });
    obj.declared_bbox = None;
    if obj.bbox().is_none() {
        return Err(Error::validation(
            Finding::error("empty_mask", format!("`{id}` left the image")).for_object(id),
        ));
    }
    Ok(out)
}

/// Write the scene and a target layout into `dir` and return a job spec over
/// them with default options, the toy backend and `dir/edited.png` as output.
pub fn write_job(dir: &Path, scene: &Scene, target: &LayoutSpec) -> Result<EditJobSpec> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let image = dir.join("source.png");
    scene.image.save(&image)?;
    scene.layout.save(dir, "source")?;
    target.save(dir, "target")?;
    Ok(EditJobSpec {
        source_image: image,
        source_layout: dir.join("source.json"),
        target_layout: dir.join("target.json"),
        concepts: None,
        learn_concepts: None,
        backend: BackendSelector::default(),
        options: EditOptions::default(),
        output: dir.join("edited.png"),
        debug_dir: None,
        telemetry: None,
    })
}
