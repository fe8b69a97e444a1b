use image::{Rgb, RgbImage};
use ndarray::Array3;

use super::Latent;
use crate::error::{Error, Result};

/// Image ↔ latent pair built from `factor × factor` average pooling.
///
/// Channels 0..3 hold the pooled RGB values scaled to [-1, 1]; any further
/// channel holds their mean. `encode(decode(z)) == z` on the RGB channels and
/// `decode(encode(img))` is the block-averaged image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolCodec {
    pub factor: usize,
    pub channels: usize,
}

impl PoolCodec {
    pub fn new(factor: usize, channels: usize) -> Result<Self> {
        if factor == 0 || channels < 3 {
            return Err(Error::Config(
                "pool codec needs factor >= 1 and at least 3 channels".into(),
            ));
        }
        Ok(PoolCodec { factor, channels })
    }

    pub fn encode(&self, image: &RgbImage, height: usize, width: usize) -> Result<Latent> {
        let f = self.factor;
        if image.width() as usize != width * f || image.height() as usize != height * f {
            return Err(Error::Backend(format!(
                "image is {}x{}, backend expects {}x{}",
                image.width(),
                image.height(),
                width * f,
                height * f
            )));
        }
        let area = (f * f) as f64;
        let mut out = Array3::zeros((self.channels, height, width));
        for (x, y, Rgb(px)) in image.enumerate_pixels() {
            let (ly, lx) = (y as usize / f, x as usize / f);
            for c in 0..3 {
                out[[c, ly, lx]] += (px[c] as f64 / 127.5 - 1.0) / area;
            }
        }
        for c in 3..self.channels {
            for ly in 0..height {
                for lx in 0..width {
                    out[[c, ly, lx]] =
                        (out[[0, ly, lx]] + out[[1, ly, lx]] + out[[2, ly, lx]]) / 3.0;
                }
            }
        }
        Latent::new(out)
    }

    pub fn decode(&self, latent: &Latent) -> Result<RgbImage> {
        if latent.channels() != self.channels {
            return Err(Error::Decode(format!(
                "latent has {} channels, codec expects {}",
                latent.channels(),
                self.channels
            )));
        }
        if !latent.is_finite() {
            return Err(Error::Decode("latent contains non-finite values".into()));
        }
        let f = self.factor as u32;
        let (h, w) = (latent.height() as u32, latent.width() as u32);
        let data = latent.data();
        Ok(RgbImage::from_fn(w * f, h * f, |x, y| {
            let (ly, lx) = ((y / f) as usize, (x / f) as usize);
            let px = |c: usize| ((data[[c, ly, lx]] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            Rgb([px(0), px(1), px(2)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_encode_is_block_average() {
        let codec = PoolCodec::new(2, 4).unwrap();
        let img = RgbImage::from_fn(4, 2, |x, _| if x < 2 { Rgb([255, 0, 0]) } else { Rgb([0, 255, 127]) });
        let z = codec.encode(&img, 1, 2).unwrap();
        assert_eq!(z.shape(), (4, 1, 2));
        assert!((z.data()[[0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!((z.data()[[3, 0, 0]] + 1.0 / 3.0).abs() < 1e-12);
        let back = codec.decode(&z).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn size_mismatch_is_backend_error() {
        let codec = PoolCodec::new(8, 4).unwrap();
        let img = RgbImage::new(12, 16);
        assert!(matches!(codec.encode(&img, 2, 2), Err(Error::Backend(_))));
    }
}
