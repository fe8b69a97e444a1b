//! Spatial resampling on 2-D grids.
//!
//! Area resampling is written as `R_y · M · R_xᵀ` with separable overlap
//! matrices so its adjoint (needed to backpropagate through attention
//! aggregation) is just the transposed product.

use ndarray::{Array2, ArrayView2};

/// Overlap weights mapping `src` cells onto `dst` cells along one axis.
/// Row `i` holds the fraction of destination cell `i` covered by each source cell.
fn area_weights(dst: usize, src: usize) -> Array2<f64> {
    let mut w = Array2::zeros((dst, src));
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let lo = i as f64 * scale;
        let hi = (i + 1) as f64 * scale;
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(src);
        for s in first..last {
            let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
            if overlap > 0.0 {
                w[[i, s]] = overlap / scale;
            }
        }
    }
    w
}

/// Resample by averaging over the covered area. Works in both directions;
/// integer down-factors reduce to plain block means.
pub fn area_resample(map: ArrayView2<'_, f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    if (h, w) == (height, width) {
        return map.to_owned();
    }
    let ry = area_weights(height, h);
    let rx = area_weights(width, w);
    ry.dot(&map).dot(&rx.t())
}

/// Adjoint of [`area_resample`]: maps a gradient on the resampled grid back
/// onto the original `(height, width)` grid.
pub fn area_resample_adjoint(
    grad: ArrayView2<'_, f64>,
    height: usize,
    width: usize,
) -> Array2<f64> {
    let (h, w) = grad.dim();
    if (h, w) == (height, width) {
        return grad.to_owned();
    }
    let ry = area_weights(h, height);
    let rx = area_weights(w, width);
    ry.t().dot(&grad).dot(&rx)
}

/// Bilinear resampling with half-pixel centers (align_corners = false).
pub fn bilinear_resample(map: ArrayView2<'_, f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    if (h, w) == (height, width) {
        return map.to_owned();
    }
    let sample = |src_len: usize, dst_len: usize, i: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    Array2::from_shape_fn((height, width), |(i, j)| {
        let (y0, y1, fy) = sample(h, height, i);
        let (x0, x1, fx) = sample(w, width, j);
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Area-average a binary mask onto another grid and threshold at 0.5.
pub fn resample_mask(mask: ArrayView2<'_, bool>, height: usize, width: usize) -> Array2<bool> {
    if mask.dim() == (height, width) {
        return mask.to_owned();
    }
    let as_f = mask.mapv(|b| if b { 1.0 } else { 0.0 });
    area_resample(as_f.view(), height, width).mapv(|v| v >= 0.5 - 1e-12)
}

/// Bounding box `(x, y, w, h)` of the set cells, or `None` for an empty mask.
pub fn mask_bbox(mask: ArrayView2<'_, bool>) -> Option<[usize; 4]> {
    let mut min_x = usize::MAX;
    let mut min_y = usize::MAX;
    let mut max_x = 0;
    let mut max_y = 0;
    let mut any = false;
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            any = true;
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
    }
    any.then(|| [min_x, min_y, max_x - min_x + 1, max_y - min_y + 1])
}

pub fn count(mask: ArrayView2<'_, bool>) -> usize {
    mask.iter().filter(|&&v| v).count()
}
