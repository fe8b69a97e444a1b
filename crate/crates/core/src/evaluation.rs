//! Desk-scale metrics: how well an edit follows its target layout, and how
//! similar each object looks before and after through a pluggable embedder.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use indexmap::IndexMap;
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::resample_mask;
use crate::layout::{mask_from_gray, LayoutSpec};
use crate::pipeline::{sha256_hex, RunManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Fraction of each object's final attention inside its target mask.
    Attention,
    /// IoU of an external segmentation with the target mask.
    Segmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub mode: AlignmentMode,
    pub per_object: IndexMap<String, f64>,
    pub mean: f64,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn score(mode: AlignmentMode, per_object: IndexMap<String, f64>) -> Result<AlignmentScore> {
    let mean = mean(per_object.values().copied()).ok_or_else(|| Error::Config("layout has no objects to score".into()))?;
    Ok(AlignmentScore { mode, per_object, mean })
}

/// Attention mode: per object, `Σ_{u∈M} A(u) / Σ_u A(u)` with the target mask
/// resampled to the map's grid.
pub fn attention_alignment(maps: &IndexMap<String, Array2<f64>>, target: &LayoutSpec) -> Result<AlignmentScore> {
    let mut per_object = IndexMap::new();
    for (i, obj) in target.objects.iter().enumerate() {
        let map = maps
            .get(&obj.id)
            .ok_or_else(|| Error::Config(format!("no attention map for `{}`", obj.id)))?;
        let (h, w) = map.dim();
        let mask = target.mask_at(i, h, w);
        let total: f64 = map.sum();
        if !(total > 0.0) || map.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!("attention map of `{}` is not a positive measure", obj.id)));
        }
        let inside: f64 = map.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(&v, _)| v).sum();
        per_object.insert(obj.id.clone(), (inside / total).clamp(0.0, 1.0));
    }
    score(AlignmentMode::Attention, per_object)
}

/// Segmentation mode: per object IoU of the segmentation with its target mask.
pub fn segmentation_alignment(segments: &IndexMap<String, Array2<bool>>, target: &LayoutSpec) -> Result<AlignmentScore> {
    let mut per_object = IndexMap::new();
    for obj in &target.objects {
        let seg = segments
            .get(&obj.id)
            .ok_or_else(|| Error::Config(format!("no segmentation for `{}`", obj.id)))?;
        let (h, w) = obj.mask.dim();
        let seg = if seg.dim() == (h, w) { seg.clone() } else { resample_mask(seg.view(), h, w) };
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in seg.iter().zip(obj.mask.iter()) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        per_object.insert(obj.id.clone(), iou);
    }
    score(AlignmentMode::Segmentation, per_object)
}

/// Final attention maps recorded in a run manifest.
pub fn manifest_attention(manifest: &RunManifest) -> Result<IndexMap<String, Array2<f64>>> {
    manifest
        .final_attention
        .iter()
        .map(|(id, rows)| {
            let h = rows.len();
            let w = rows.first().map_or(0, Vec::len);
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let map = Array2::from_shape_vec((h, w), flat)
                .map_err(|_| Error::Config(format!("ragged attention map for `{id}`")))?;
            Ok((id.clone(), map))
        })
        .collect()
}

/// Segmentation when available, attention from the manifest otherwise.
pub fn layout_alignment_score(
    manifest: Option<&RunManifest>,
    segmentation: Option<&IndexMap<String, Array2<bool>>>,
    target: &LayoutSpec,
) -> Result<AlignmentScore> {
    match (segmentation, manifest) {
        (Some(seg), _) => segmentation_alignment(seg, target),
        (None, Some(m)) => attention_alignment(&manifest_attention(m)?, target),
        (None, None) => Err(Error::Config(
            "layout alignment needs final attention maps or a segmentation".into(),
        )),
    }
}

/// Image embedding client, e.g. a CLIP or DINO service.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    /// Unit-norm embedding of `crop`.
    fn embed(&self, crop: &RgbImage) -> Result<Vec<f64>>;
}

/// Deterministic stand-in: a Gaussian vector seeded by the crop's pixels.
/// Identical crops embed identically; different ones are nearly orthogonal.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: 128 }
    }
}

impl Embedder for HashEmbedder {
    fn name(&self) -> &str {
        "hash"
    }

    fn embed(&self, crop: &RgbImage) -> Result<Vec<f64>> {
        let mut bytes = crop.width().to_le_bytes().to_vec();
        bytes.extend(crop.height().to_le_bytes());
        bytes.extend_from_slice(crop.as_raw());
        let mut rng = crate::rng::substream(0, &sha256_hex(&bytes));
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(normalize(v))
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("embedding sizes differ: {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("zero embedding".into()));
    }
    Ok(dot / (na * nb))
}

/// A metric value, or the reason it could not be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Metric<T> {
    Ok(T),
    Skipped { reason: String },
}

impl<T> Metric<T> {
    pub fn value(&self) -> Option<&T> {
        match self {
            Metric::Ok(v) => Some(v),
            Metric::Skipped { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub embedder: String,
    pub per_object: IndexMap<String, f64>,
    pub mean: f64,
}

/// Crop of `image` at the object's bounding box.
pub fn object_crop(image: &RgbImage, layout: &LayoutSpec, id: &str) -> Result<RgbImage> {
    let obj = layout.get(id).ok_or_else(|| Error::Config(format!("no object `{id}`")))?;
    let [x, y, w, h] = obj.bbox().ok_or_else(|| Error::Config(format!("mask of `{id}` is empty")))?;
    if x + w > image.width() || y + h > image.height() {
        return Err(Error::Config(format!("box of `{id}` leaves the image")));
    }
    Ok(imageops::crop_imm(image, x, y, w, h).to_image())
}

/// Cosine similarity of each object's source crop and edited crop.
/// Any embedder failure marks the metric skipped.
pub fn visual_similarity(
    source: &RgbImage,
    source_layout: &LayoutSpec,
    edited: &RgbImage,
    target_layout: &LayoutSpec,
    embedder: &dyn Embedder,
) -> Result<Metric<SimilarityScore>> {
    let mut per_object = IndexMap::new();
    for obj in &target_layout.objects {
        let a = object_crop(source, source_layout, &obj.id)?;
        let b = object_crop(edited, target_layout, &obj.id)?;
        let (ea, eb) = match (embedder.embed(&a), embedder.embed(&b)) {
            (Ok(ea), Ok(eb)) => (ea, eb),
            (Err(e), _) | (_, Err(e)) => {
                log::warn!("embedder `{}` failed: {e}", embedder.name());
                return Ok(Metric::Skipped {
                    reason: format!("embedder `{}` unavailable: {e}", embedder.name()),
                });
            }
        };
        per_object.insert(obj.id.clone(), cosine(&ea, &eb)?);
    }
    let Some(mean) = mean(per_object.values().copied()) else {
        return Ok(Metric::Skipped {
            reason: "layout has no objects".into(),
        });
    };
    Ok(Metric::Ok(SimilarityScore {
        embedder: embedder.name().to_string(),
        per_object,
        mean,
    }))
}

/// File layout of one evaluation case, relative to its directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseFiles {
    pub source_image: PathBuf,
    pub source_layout: PathBuf,
    pub target_layout: PathBuf,
    pub edited_image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Object id to segmentation mask PNG.
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub segmentation: IndexMap<String, PathBuf>,
}

impl Default for CaseFiles {
    fn default() -> Self {
        CaseFiles {
            source_image: "source.png".into(),
            source_layout: "source.json".into(),
            target_layout: "target.json".into(),
            edited_image: "edited.png".into(),
            manifest: Some("edited.manifest.json".into()),
            segmentation: IndexMap::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalCase {
    pub name: String,
    pub source_image: RgbImage,
    pub source_layout: LayoutSpec,
    pub target_layout: LayoutSpec,
    pub edited_image: RgbImage,
    pub manifest: Option<RunManifest>,
    pub segmentation: Option<IndexMap<String, Array2<bool>>>,
}

fn open_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?
        .to_rgb8())
}

impl EvalCase {
    /// Load `dir/case.json`, or the default file names when it is absent.
    pub fn load(dir: &Path) -> Result<Self> {
        let index = dir.join("case.json");
        let files: CaseFiles = if index.is_file() {
            serde_json::from_str(&fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?)?
        } else {
            CaseFiles::default()
        };
        let source_layout = LayoutSpec::load(&dir.join(&files.source_layout), None)?;
        let target_layout = LayoutSpec::load(&dir.join(&files.target_layout), Some(&source_layout))?;
        let manifest = match &files.manifest {
            Some(m) if dir.join(m).is_file() => Some(RunManifest::load(&dir.join(m))?),
            _ => None,
        };
        let segmentation = if files.segmentation.is_empty() {
            None
        } else {
            let mut segs = IndexMap::new();
            for (id, p) in &files.segmentation {
                let p = dir.join(p);
                let gray = image::open(&p)
                    .map_err(|e| match e {
                        image::ImageError::IoError(io) => Error::io(&p, io),
                        other => Error::Image(other),
                    })?
                    .to_luma8();
                segs.insert(id.clone(), mask_from_gray(&gray));
            }
            Some(segs)
        };
        Ok(EvalCase {
            name: dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
            source_image: open_rgb(&dir.join(&files.source_image))?,
            edited_image: open_rgb(&dir.join(&files.edited_image))?,
            source_layout,
            target_layout,
            manifest,
            segmentation,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub alignment: Metric<AlignmentScore>,
    pub similarity: Metric<SimilarityScore>,
}

pub fn evaluate_case(case: &EvalCase, embedder: Option<&dyn Embedder>) -> Result<CaseReport> {
    let alignment = match layout_alignment_score(case.manifest.as_ref(), case.segmentation.as_ref(), &case.target_layout) {
        Ok(s) => Metric::Ok(s),
        Err(Error::Config(reason)) => Metric::Skipped { reason },
        Err(e) => return Err(e),
    };
    let similarity = match embedder {
        Some(e) => visual_similarity(&case.source_image, &case.source_layout, &case.edited_image, &case.target_layout, e)?,
        None => Metric::Skipped {
            reason: "no embedder configured".into(),
        },
    };
    Ok(CaseReport {
        name: case.name.clone(),
        alignment,
        similarity,
    })
}

/// Mean and population standard deviation over the cases that produced a value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: Option<f64>,
    pub stddev: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let m = mean(values.iter().copied());
        let stddev = m.map(|m| (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt());
        Summary {
            count: values.len(),
            mean: m,
            stddev,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub cases: Vec<CaseReport>,
    /// Alignment summary per mode.
    pub alignment: IndexMap<String, Summary>,
    pub similarity: Summary,
}

pub fn summarize(cases: Vec<CaseReport>) -> BatchReport {
    let mut by_mode: IndexMap<String, Vec<f64>> = IndexMap::new();
    for c in &cases {
        if let Some(a) = c.alignment.value() {
            let key = serde_json::to_value(a.mode).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            by_mode.entry(key).or_default().push(a.mean);
        }
    }
    let sims: Vec<f64> = cases.iter().filter_map(|c| c.similarity.value().map(|s| s.mean)).collect();
    BatchReport {
        alignment: by_mode.into_iter().map(|(k, v)| (k, Summary::of(&v))).collect(),
        similarity: Summary::of(&sims),
        cases,
    }
}

/// Evaluate every subdirectory of `dir` as a case, in name order.
pub fn evaluate_dir(dir: &Path, embedder: Option<&dyn Embedder>) -> Result<BatchReport> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let cases = dirs
        .par_iter()
        .map(|d| evaluate_case(&EvalCase::load(d)?, embedder))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(cases))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::LayoutObject;
    use approx::assert_abs_diff_eq;

    fn layout(masks: Vec<(&str, Array2<bool>)>) -> LayoutSpec {
        let (h, w) = masks[0].1.dim();
        LayoutSpec {
            width: w as u32,
            height: h as u32,
            objects: masks
                .into_iter()
                .map(|(id, mask)| LayoutObject {
                    id: id.into(),
                    token: id.into(),
                    mask,
                    declared_bbox: None,
                })
                .collect(),
        }
    }

    #[test]
    fn uniform_attention_quarter_mask() {
        let mask = Array2::from_shape_fn((8, 8), |(y, x)| y < 4 && x < 4);
        let l = layout(vec![("a", mask)]);
        let maps = IndexMap::from([("a".to_string(), Array2::from_elem((8, 8), 0.3))]);
        let s = attention_alignment(&maps, &l).unwrap();
        assert_abs_diff_eq!(s.mean, 0.25, epsilon = 1e-12);
        assert_eq!(s.mode, AlignmentMode::Attention);
    }

    #[test]
    fn contained_attention_and_identical_segmentation_score_one() {
        let a = Array2::from_shape_fn((8, 8), |(y, _)| y < 3);
        let b = Array2::from_shape_fn((8, 8), |(y, x)| y > 4 && x > 2);
        let l = layout(vec![("a", a.clone()), ("b", b.clone())]);
        let maps: IndexMap<String, Array2<f64>> = [("a", &a), ("b", &b)]
            .into_iter()
            .map(|(id, m)| (id.to_string(), m.mapv(|v| if v { 2.0 } else { 0.0 })))
            .collect();
        assert_eq!(attention_alignment(&maps, &l).unwrap().mean, 1.0);
        let segs = IndexMap::from([("b".to_string(), b), ("a".to_string(), a)]);
        let s = segmentation_alignment(&segs, &l).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.mode, AlignmentMode::Segmentation);
    }

    #[test]
    fn alignment_needs_an_input() {
        let l = layout(vec![("a", Array2::from_elem((2, 2), true))]);
        assert!(layout_alignment_score(None, None, &l).is_err());
    }

    #[test]
    fn identical_crops_are_similar() {
        let scene = crate::scene::demo_scene(0, 64);
        let s = visual_similarity(&scene.image, &scene.layout, &scene.image, &scene.layout, &HashEmbedder::default())
            .unwrap();
        let s = s.value().unwrap();
        assert_abs_diff_eq!(s.mean, 1.0, epsilon = 1e-6);
    }

    struct Fixed;

    impl Embedder for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }

        fn embed(&self, crop: &RgbImage) -> Result<Vec<f64>> {
            // Source crops are the unedited ones, told apart by their first pixel.
            Ok(if crop.get_pixel(0, 0)[0] == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
        }
    }

    struct Down;

    impl Embedder for Down {
        fn name(&self) -> &str {
            "down"
        }

        fn embed(&self, _: &RgbImage) -> Result<Vec<f64>> {
            Err(Error::Backend("connection refused".into()))
        }
    }

    #[test]
    fn orthogonal_mock_and_unavailable_embedder() {
        let l = layout(vec![("a", Array2::from_elem((4, 4), true))]);
        let black = RgbImage::new(4, 4);
        let white = RgbImage::from_pixel(4, 4, image::Rgb([255; 3]));
        let s = visual_similarity(&black, &l, &white, &l, &Fixed).unwrap();
        assert_eq!(s.value().unwrap().mean, 0.0);
        let s = visual_similarity(&black, &l, &white, &l, &Down).unwrap();
        assert!(matches!(s, Metric::Skipped { .. }));
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["status"], "SKIPPED");
    }

    #[test]
    fn summary_is_population_statistics() {
        let s = Summary::of(&[0.2, 0.4, 0.9]);
        assert_abs_diff_eq!(s.mean.unwrap(), 0.5, epsilon = 1e-12);
        let var = ((0.3f64).powi(2) + (0.1f64).powi(2) + (0.4f64).powi(2)) / 3.0;
        assert_abs_diff_eq!(s.stddev.unwrap(), var.sqrt(), epsilon = 1e-12);
        assert_eq!(Summary::of(&[]).mean, None);
    }
}
