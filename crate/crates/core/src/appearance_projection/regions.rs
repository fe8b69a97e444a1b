use std::collections::HashSet;

use image::{GrayImage, Luma};
use imageproc::distance_transform::Norm;
use imageproc::morphology::{dilate, erode};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::LayoutSpec;
use crate::pipeline::validate::Finding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionLabel {
    Background,
    Uncertain,
    /// Index into [`RegionDecomposition::object_ids`].
    Foreground(usize),
}

/// Three-way split of the target grid plus the source transitional band.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionDecomposition {
    pub grid: (usize, usize),
    /// Object ids in target-layout order.
    pub object_ids: Vec<String>,
    pub labels: Array2<RegionLabel>,
    /// Each object's source mask on the grid, aligned with `object_ids`.
    pub source_masks: Vec<Array2<bool>>,
    /// `dilate(src_union, r) − erode(src_union, r)` on the source grid.
    pub band: Array2<bool>,
}

impl RegionDecomposition {
    pub fn count(&self, label: RegionLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

fn to_gray(mask: &Array2<bool>) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    })
}

fn from_gray(img: &GrayImage) -> Array2<bool> {
    Array2::from_shape_fn((img.height() as usize, img.width() as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] > 0
    })
}

/// Ring of width up to `radius` around the boundary of `mask`, square element.
pub fn transitional_band(mask: &Array2<bool>, radius: u8) -> Array2<bool> {
    if radius == 0 {
        return Array2::from_elem(mask.dim(), false);
    }
    let gray = to_gray(mask);
    let grown = from_gray(&dilate(&gray, Norm::LInf, radius));
    let shrunk = from_gray(&erode(&gray, Norm::LInf, radius));
    Array2::from_shape_fn(mask.dim(), |idx| grown[idx] && !shrunk[idx])
}

/// Label every target cell and build the transitional band.
///
/// Overlapping target masks resolve to the last object in the target layout.
pub fn decompose_regions(
    source: &LayoutSpec,
    target: &LayoutSpec,
    grid: (usize, usize),
    radius: u8,
) -> Result<RegionDecomposition> {
    let src_ids: HashSet<&str> = source.ids().into_iter().collect();
    let tar_ids: HashSet<&str> = target.ids().into_iter().collect();
    if src_ids != tar_ids || source.objects.len() != target.objects.len() {
        let mut findings = Vec::new();
        for id in tar_ids.difference(&src_ids) {
            findings.push(Finding::error("id_mismatch", format!("`{id}` is missing from the source layout")).for_object(id));
        }
        for id in src_ids.difference(&tar_ids) {
            findings.push(Finding::error("id_mismatch", format!("`{id}` is missing from the target layout")).for_object(id));
        }
        if findings.is_empty() {
            findings.push(Finding::error("id_mismatch", "layouts list different numbers of objects"));
        }
        return Err(Error::Validation(findings));
    }

    let (h, w) = grid;
    let object_ids: Vec<String> = target.objects.iter().map(|o| o.id.clone()).collect();
    let mut labels = Array2::from_elem(grid, RegionLabel::Background);
    for i in 0..target.objects.len() {
        let mask = target.mask_at(i, h, w);
        labels.zip_mut_with(&mask, |l, &m| {
            if m {
                *l = RegionLabel::Foreground(i);
            }
        });
    }

    let source_masks: Vec<Array2<bool>> = object_ids
        .iter()
        .map(|id| {
            let idx = source.objects.iter().position(|o| &o.id == id).expect("ids checked");
            source.mask_at(idx, h, w)
        })
        .collect();
    let src_union = source.union_at(h, w);
    labels.zip_mut_with(&src_union, |l, &in_src| {
        if in_src && *l == RegionLabel::Background {
            *l = RegionLabel::Uncertain;
        }
    });

    Ok(RegionDecomposition {
        grid,
        object_ids,
        labels,
        source_masks,
        band: transitional_band(&src_union, radius),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::LayoutObject;

    fn rect(h: usize, w: usize, x: usize, y: usize, bw: usize, bh: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(r, c)| r >= y && r < y + bh && c >= x && c < x + bw)
    }

    fn layout(objs: &[(&str, Array2<bool>)]) -> LayoutSpec {
        let (h, w) = objs.first().map(|o| o.1.dim()).unwrap_or((8, 8));
        LayoutSpec {
            width: w as u32,
            height: h as u32,
            objects: objs
                .iter()
                .map(|(id, m)| LayoutObject {
                    id: id.to_string(),
                    token: "cat".into(),
                    mask: m.clone(),
                    declared_bbox: None,
                })
                .collect(),
        }
    }

    #[test]
    fn unchanged_layout_has_no_uncertain_cells() {
        let l = layout(&[("a", rect(8, 8, 1, 1, 3, 3)), ("b", rect(8, 8, 5, 4, 2, 3))]);
        let d = decompose_regions(&l, &l, (8, 8), 1).unwrap();
        assert_eq!(d.count(RegionLabel::Uncertain), 0);
        assert_eq!(d.count(RegionLabel::Foreground(0)), 9);
        assert_eq!(d.count(RegionLabel::Foreground(1)), 6);
        assert_eq!(d.count(RegionLabel::Background), 64 - 15);
    }

    #[test]
    fn moved_object_leaves_uncertain_hole() {
        let src = layout(&[("a", rect(8, 8, 0, 0, 3, 3))]);
        let tar = layout(&[("a", rect(8, 8, 5, 5, 3, 3))]);
        let d = decompose_regions(&src, &tar, (8, 8), 1).unwrap();
        // brute-force set algebra over the grid
        for y in 0..8 {
            for x in 0..8 {
                let in_src = y < 3 && x < 3;
                let in_tar = (5..8).contains(&y) && (5..8).contains(&x);
                let expected = if in_tar {
                    RegionLabel::Foreground(0)
                } else if in_src {
                    RegionLabel::Uncertain
                } else {
                    RegionLabel::Background
                };
                assert_eq!(d.labels[[y, x]], expected, "({y},{x})");
            }
        }
    }

    #[test]
    fn overlap_goes_to_last_object() {
        let l = layout(&[("a", rect(8, 8, 0, 0, 4, 4)), ("b", rect(8, 8, 2, 2, 4, 4))]);
        let d = decompose_regions(&l, &l, (8, 8), 1).unwrap();
        assert_eq!(d.labels[[3, 3]], RegionLabel::Foreground(1));
        assert_eq!(d.labels[[1, 1]], RegionLabel::Foreground(0));
    }

    #[test]
    fn empty_layouts_are_all_background() {
        let e = LayoutSpec::empty(8, 8);
        let d = decompose_regions(&e, &e, (8, 8), 4).unwrap();
        assert_eq!(d.count(RegionLabel::Background), 64);
        assert!(d.band.iter().all(|&b| !b));
    }

    #[test]
    fn band_is_dilation_minus_erosion() {
        let m = rect(10, 10, 2, 2, 5, 5);
        let band = transitional_band(&m, 1);
        // ring: 7x7 dilated square minus 3x3 eroded core
        assert_eq!(band.iter().filter(|&&b| b).count(), 49 - 9);
        assert!(!band[[4, 4]]);
        assert!(band[[1, 1]] && band[[2, 2]]);
    }

    #[test]
    fn id_mismatch_is_validation_error() {
        let a = layout(&[("a", rect(8, 8, 0, 0, 2, 2))]);
        let b = layout(&[("b", rect(8, 8, 0, 0, 2, 2))]);
        match decompose_regions(&a, &b, (8, 8), 1) {
            Err(Error::Validation(f)) => assert_eq!(f.len(), 2),
            other => panic!("expected validation error, got {other:?}"),
        }
    }
}
