//! Starting latents for editing: plain Gaussian noise, or the inverted
//! crop-and-paste composite blended with noise.

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::{ddim_invert_trace, Denoiser, InversionConfig, Latent};
use crate::error::{Error, Result};
use crate::layout::{BoxTransform, LayoutSpec};
use crate::pipeline::validate::Finding;
use crate::rng::{standard_normal, substream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Random,
    Lfin,
    /// Start from the end of the source inversion trace.
    SourceInversion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LfinConfig {
    /// Inversion depth as a fraction of the schedule.
    pub stop_fraction: f64,
    /// Weight of the inverted composite in the variance-preserving blend.
    pub blend_lambda: f64,
    /// Blend only inside target masks; pure noise elsewhere.
    pub mask_aware: bool,
    /// Canvas gray level behind pasted objects.
    pub fill: u8,
}

impl Default for LfinConfig {
    fn default() -> Self {
        LfinConfig {
            stop_fraction: 0.7,
            blend_lambda: 0.7,
            mask_aware: false,
            fill: 127,
        }
    }
}

impl LfinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stop_fraction > 0.0 && self.stop_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "lfin stop_fraction {} must be in (0, 1]",
                self.stop_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.blend_lambda) {
            return Err(Error::Config(format!(
                "lfin blend_lambda {} must be in [0, 1]",
                self.blend_lambda
            )));
        }
        Ok(())
    }

    /// Step the blended latent lives at.
    pub fn start_step(&self, num_steps: usize) -> usize {
        (self.stop_fraction * num_steps as f64).round() as usize
    }
}

/// Paste every object's masked source pixels into its target box on a
/// uniform canvas. Later objects are pasted on top.
pub fn composite_image(
    source: &RgbImage,
    src_layout: &LayoutSpec,
    tar_layout: &LayoutSpec,
    fill: u8,
) -> Result<RgbImage> {
    let (w, h) = source.dimensions();
    let mut canvas = RgbImage::from_pixel(w, h, Rgb([fill; 3]));
    for tar in &tar_layout.objects {
        let src = src_layout.get(&tar.id).ok_or_else(|| {
            Error::validation(
                Finding::error("id_mismatch", format!("`{}` is missing from the source layout", tar.id))
                    .for_object(&tar.id),
            )
        })?;
        let degenerate = || {
            Error::validation(Finding::error("degenerate_bbox", "mask is empty").for_object(&tar.id))
        };
        let src_box = src.bbox().ok_or_else(degenerate)?;
        let dst_box = tar.bbox().ok_or_else(degenerate)?;
        let tf = BoxTransform::new(src_box, dst_box).map_err(|_| degenerate())?;
        let mask = &src.mask;
        let (mh, mw) = mask.dim();
        for y in dst_box[1]..(dst_box[1] + dst_box[3]).min(h) {
            for x in dst_box[0]..(dst_box[0] + dst_box[2]).min(w) {
                let (sx, sy) = tf.source_of(x, y);
                if sx < 0 || sy < 0 || sx as usize >= mw || sy as usize >= mh {
                    continue;
                }
                if mask[[sy as usize, sx as usize]] && (sx as u32) < w && (sy as u32) < h {
                    canvas.put_pixel(x, y, *source.get_pixel(sx as u32, sy as u32));
                }
            }
        }
    }
    Ok(canvas)
}

/// Standard normal latent drawn from the `init` substream of `seed`.
pub fn random_noise(seed: u64, shape: (usize, usize, usize)) -> Latent {
    Latent::new(standard_normal(&mut substream(seed, "init"), shape)).expect("finite normal draws")
}

/// `sqrt(λ)·x + sqrt(1−λ)·ε`, exact at the ends. With `mask` the blend is
/// applied only inside it and `ε` is kept elsewhere.
pub fn blend(x: &Latent, eps: &Latent, lambda: f64, mask: Option<&Array2<bool>>) -> Result<Latent> {
    if x.shape() != eps.shape() {
        return Err(Error::Contract("blend inputs differ in shape".into()));
    }
    let mixed = if lambda == 1.0 {
        x.clone()
    } else if lambda == 0.0 {
        eps.clone()
    } else {
        Latent::new(x.data() * lambda.sqrt() + eps.data() * (1.0 - lambda).sqrt())?
    };
    let Some(mask) = mask else {
        return Ok(mixed);
    };
    let mut out = eps.data().clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        for ((y, xx), v) in plane.indexed_iter_mut() {
            if mask[[y, xx]] {
                *v = mixed.data()[[c, y, xx]];
            }
        }
    }
    Latent::new(out)
}

/// Invert `composite` to the configured depth and blend it with seeded noise.
/// Returns the blended latent and the step it belongs to.
pub fn lfin_noise(
    denoiser: &dyn Denoiser,
    composite: &Latent,
    prompt: &str,
    config: &LfinConfig,
    seed: u64,
    inversion: &InversionConfig,
    mask: Option<&Array2<bool>>,
) -> Result<(Latent, usize)> {
    config.validate()?;
    let trace = ddim_invert_trace(denoiser, composite, prompt, config.stop_fraction, inversion)?;
    let eps = random_noise(seed, composite.shape());
    let start = trace.last_step();
    Ok((blend(trace.last(), &eps, config.blend_lambda, mask)?, start))
}
