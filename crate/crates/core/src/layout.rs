//! Object layouts: named binary masks over an image, plus the layout JSON format.
//!
//! ```json
//! {"width":W,"height":H,"objects":[{"id":"obj1","token":"cat","mask":"cat_mask.png","bbox":[x,y,w,h]}]}
//! ```
//!
//! Masks are single-channel PNGs (255 = object). A target layout may omit
//! `mask` and give only `bbox`; the source mask is then carried into the
//! box by [`BoxTransform`].

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{mask_bbox, resample_mask};
use crate::pipeline::validate::Finding;

/// Pixel box `[x, y, w, h]`.
pub type BBox = [u32; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: String,
    pub token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

/// The on-disk layout document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutDocument {
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutObject {
    pub id: String,
    pub token: String,
    /// `[height, width]` at image resolution.
    pub mask: Array2<bool>,
    /// Box as declared in the document, if any.
    pub declared_bbox: Option<BBox>,
}

impl LayoutObject {
    pub fn bbox(&self) -> Option<BBox> {
        mask_bbox(self.mask.view()).map(|[x, y, w, h]| [x as u32, y as u32, w as u32, h as u32])
    }

    /// The object's noun phrase as a sequence of words.
    pub fn words(&self) -> Vec<String> {
        self.token.split_whitespace().map(str::to_lowercase).collect()
    }
}

/// Ordered objects over a `width x height` image. Order is stacking order:
/// later objects are in front.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutSpec {
    pub width: u32,
    pub height: u32,
    pub objects: Vec<LayoutObject>,
}

/// Translate + uniform-scale map from a source box into a target box. The
/// scaled source box is centred in the target box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTransform {
    src: BBox,
    scale: f64,
    offset: (f64, f64),
}

impl BoxTransform {
    pub fn new(src: BBox, dst: BBox) -> Result<Self> {
        if src[2] == 0 || src[3] == 0 {
            return Err(Error::validation(Finding::error(
                "degenerate_bbox",
                "source bbox has zero area",
            )));
        }
        if dst[2] == 0 || dst[3] == 0 {
            return Err(Error::validation(Finding::error(
                "degenerate_bbox",
                "target bbox has zero area",
            )));
        }
        let scale = (dst[2] as f64 / src[2] as f64).min(dst[3] as f64 / src[3] as f64);
        let offset = (
            dst[0] as f64 + (dst[2] as f64 - src[2] as f64 * scale) / 2.0,
            dst[1] as f64 + (dst[3] as f64 - src[3] as f64 * scale) / 2.0,
        );
        Ok(BoxTransform { src, scale, offset })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Source pixel that lands on target pixel `(x, y)`; may be out of range.
    pub fn source_of(&self, x: u32, y: u32) -> (i64, i64) {
        let sx = self.src[0] as f64 + (x as f64 + 0.5 - self.offset.0) / self.scale;
        let sy = self.src[1] as f64 + (y as f64 + 0.5 - self.offset.1) / self.scale;
        (sx.floor() as i64, sy.floor() as i64)
    }
}

/// Carry `mask` from its own bbox into `dst` on a `height x width` canvas.
pub fn transport_mask(mask: &Array2<bool>, dst: BBox) -> Result<Array2<bool>> {
    let (h, w) = mask.dim();
    let src = mask_bbox(mask.view())
        .map(|[x, y, bw, bh]| [x as u32, y as u32, bw as u32, bh as u32])
        .ok_or_else(|| Error::validation(Finding::error("empty_mask", "cannot transport an empty mask")))?;
    let tf = BoxTransform::new(src, dst)?;
    let mut out = Array2::from_elem((h, w), false);
    let y_end = (dst[1] + dst[3]).min(h as u32);
    let x_end = (dst[0] + dst[2]).min(w as u32);
    for y in dst[1]..y_end {
        for x in dst[0]..x_end {
            let (sx, sy) = tf.source_of(x, y);
            if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                out[[y as usize, x as usize]] = mask[[sy as usize, sx as usize]];
            }
        }
    }
    Ok(out)
}

pub fn mask_from_gray(img: &GrayImage) -> Array2<bool> {
    Array2::from_shape_fn((img.height() as usize, img.width() as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    })
}

pub fn mask_to_gray(mask: &Array2<bool>) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    })
}

impl LayoutSpec {
    pub fn empty(width: u32, height: u32) -> Self {
        LayoutSpec {
            width,
            height,
            objects: Vec::new(),
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.objects.iter().map(|o| o.id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&LayoutObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Resolve a document. `load_mask` reads a mask by the name given in the
    /// document; objects without a mask are transported from `source`.
    pub fn from_document(
        doc: &LayoutDocument,
        mut load_mask: impl FnMut(&str) -> Result<GrayImage>,
        source: Option<&LayoutSpec>,
    ) -> Result<Self> {
        let mut objects = Vec::with_capacity(doc.objects.len());
        for entry in &doc.objects {
            let mask = match (&entry.mask, entry.bbox, source) {
                (Some(name), _, _) => mask_from_gray(&load_mask(name)?),
                (None, Some(bbox), Some(src)) => {
                    let src_obj = src.get(&entry.id).ok_or_else(|| {
                        Error::validation(
                            Finding::error(
                                "unknown_object",
                                format!("object `{}` has no mask and is absent from the source layout", entry.id),
                            )
                            .for_object(&entry.id),
                        )
                    })?;
                    transport_mask(&src_obj.mask, bbox)?
                }
                (None, _, _) => {
                    return Err(Error::validation(
                        Finding::error(
                            "missing_mask",
                            format!("object `{}` needs a mask (or a bbox and a source layout)", entry.id),
                        )
                        .for_object(&entry.id),
                    ))
                }
            };
            objects.push(LayoutObject {
                id: entry.id.clone(),
                token: entry.token.clone(),
                mask,
                declared_bbox: if entry.mask.is_some() { entry.bbox } else { None },
            });
        }
        Ok(LayoutSpec {
            width: doc.width,
            height: doc.height,
            objects,
        })
    }

    pub fn load(path: &Path, source: Option<&LayoutSpec>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: LayoutDocument = serde_json::from_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_document(
            &doc,
            |name| {
                let p = dir.join(name);
                Ok(image::open(&p)
                    .map_err(|e| match e {
                        image::ImageError::IoError(io) => Error::io(&p, io),
                        other => Error::Image(other),
                    })?
                    .to_luma8())
            },
            source,
        )
    }

    /// Write `<name>.json` and one `<name>_<id>.png` mask per object into `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(dir.join(format!("{name}.json")), serde_json::to_vec_pretty(&self.document(name))?)
            .map_err(|e| Error::io(dir, e))?;
        for obj in &self.objects {
            mask_to_gray(&obj.mask).save(dir.join(format!("{name}_{}.png", obj.id)))?;
        }
        Ok(())
    }

    /// Document referencing masks as written by [`LayoutSpec::save`].
    pub fn document(&self, name: &str) -> LayoutDocument {
        LayoutDocument {
            width: self.width,
            height: self.height,
            objects: self
                .objects
                .iter()
                .map(|o| ObjectEntry {
                    id: o.id.clone(),
                    token: o.token.clone(),
                    mask: Some(format!("{name}_{}.png", o.id)),
                    bbox: o.bbox(),
                })
                .collect(),
        }
    }

    /// Object `i`'s mask on an `h x w` grid (area average, threshold 0.5).
    pub fn mask_at(&self, i: usize, h: usize, w: usize) -> Array2<bool> {
        resample_mask(self.objects[i].mask.view(), h, w)
    }

    /// Union of all object masks on an `h x w` grid.
    pub fn union_at(&self, h: usize, w: usize) -> Array2<bool> {
        let mut out = Array2::from_elem((h, w), false);
        for i in 0..self.objects.len() {
            out.zip_mut_with(&self.mask_at(i, h, w), |a, &b| *a |= b);
        }
        out
    }

    /// Structural checks on a single layout.
    pub fn findings(&self) -> Vec<Finding> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let dims = (self.height as usize, self.width as usize);
        for obj in &self.objects {
            if !seen.insert(obj.id.as_str()) {
                out.push(Finding::error("duplicate_id", format!("duplicate object id `{}`", obj.id)).for_object(&obj.id));
            }
            if obj.token.trim().is_empty() {
                out.push(Finding::error("empty_token", format!("object `{}` has an empty token", obj.id)).for_object(&obj.id));
            }
            if obj.mask.dim() != dims {
                out.push(
                    Finding::error(
                        "mask_bounds",
                        format!(
                            "mask of `{}` is {}x{}, image is {}x{}",
                            obj.id,
                            obj.mask.ncols(),
                            obj.mask.nrows(),
                            self.width,
                            self.height
                        ),
                    )
                    .for_object(&obj.id),
                );
                continue;
            }
            match obj.bbox() {
                None => out.push(Finding::error("empty_mask", format!("mask of `{}` is empty", obj.id)).for_object(&obj.id)),
                Some(actual) => {
                    if let Some(declared) = obj.declared_bbox {
                        if declared != actual {
                            out.push(
                                Finding::error(
                                    "bbox_mismatch",
                                    format!("bbox of `{}` is {declared:?}, mask extent is {actual:?}", obj.id),
                                )
                                .for_object(&obj.id),
                            );
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, x: usize, y: usize, bw: usize, bh: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(r, c)| r >= y && r < y + bh && c >= x && c < x + bw)
    }

    #[test]
    fn transport_translates_exactly() {
        let m = rect(16, 16, 1, 2, 4, 3);
        let out = transport_mask(&m, [9, 10, 4, 3]).unwrap();
        assert_eq!(out, rect(16, 16, 9, 10, 4, 3));
    }

    #[test]
    fn transport_scales_uniformly() {
        let m = rect(16, 16, 0, 0, 2, 2);
        let out = transport_mask(&m, [4, 4, 8, 4]).unwrap();
        // scale = min(4, 2) = 2 -> 4x4 content centred in the 8x4 box
        assert_eq!(out, rect(16, 16, 6, 4, 4, 4));
        assert!(transport_mask(&m, [0, 0, 0, 3]).is_err());
    }

    #[test]
    fn bbox_only_target_uses_source_mask() {
        let source = LayoutSpec {
            width: 16,
            height: 16,
            objects: vec![LayoutObject {
                id: "a".into(),
                token: "cat".into(),
                mask: rect(16, 16, 0, 0, 3, 3),
                declared_bbox: None,
            }],
        };
        let doc = LayoutDocument {
            width: 16,
            height: 16,
            objects: vec![ObjectEntry {
                id: "a".into(),
                token: "cat".into(),
                mask: None,
                bbox: Some([10, 10, 3, 3]),
            }],
        };
        let target = LayoutSpec::from_document(&doc, |_| unreachable!(), Some(&source)).unwrap();
        assert_eq!(target.objects[0].bbox(), Some([10, 10, 3, 3]));
        assert!(target.findings().is_empty());
        let orphan = LayoutSpec::from_document(&doc, |_| unreachable!(), None);
        assert!(matches!(orphan, Err(Error::Validation(_))));
    }

    #[test]
    fn findings_cover_structure() {
        let spec = LayoutSpec {
            width: 8,
            height: 8,
            objects: vec![
                LayoutObject {
                    id: "a".into(),
                    token: "cat".into(),
                    mask: Array2::from_elem((8, 8), false),
                    declared_bbox: None,
                },
                LayoutObject {
                    id: "a".into(),
                    token: "pot".into(),
                    mask: rect(8, 8, 1, 1, 2, 2),
                    declared_bbox: Some([0, 0, 2, 2]),
                },
            ],
        };
        let codes: Vec<_> = spec.findings().into_iter().map(|f| f.code).collect();
        assert_eq!(codes, ["empty_mask", "duplicate_id", "bbox_mismatch"]);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = LayoutSpec {
            width: 16,
            height: 8,
            objects: vec![LayoutObject {
                id: "obj1".into(),
                token: "cat".into(),
                mask: rect(8, 16, 3, 1, 5, 4),
                declared_bbox: None,
            }],
        };
        spec.save(dir.path(), "layout").unwrap();
        let back = LayoutSpec::load(&dir.path().join("layout.json"), None).unwrap();
        assert_eq!(back.objects[0].mask, spec.objects[0].mask);
        assert_eq!(back.objects[0].declared_bbox, Some([3, 1, 5, 4]));
        assert!(back.findings().is_empty());
    }
}
