//! Semantic correspondence between the source replay and the edited latent,
//! and injection of warped source values into target self-attention.

mod pca;
mod regions;

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use pca::PcaFit;
pub use regions::{decompose_regions, transitional_band, RegionDecomposition, RegionLabel};

use crate::backend::{
    AttentionIntervention, Denoiser, Latent, LayerId, LayerSelector, TapConfig,
};
use crate::error::{Error, Result};
use crate::grid::bilinear_resample;

/// Guard added to the norm product in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaFitMode {
    /// Refit on both branches at every step.
    #[default]
    PerStep,
    /// Fit once at the first projected step and reuse.
    Once,
}

/// Which editing branches receive the warped values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApaScope {
    BaseOnly,
    #[default]
    AllBranches,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub enabled: bool,
    pub pca_dims: usize,
    pub pca_fit: PcaFitMode,
    /// Morphology radius of the transitional band, in working-grid cells.
    pub radius: u8,
    /// Apply the background / instance / band restrictions to the field.
    pub region_prior: bool,
    /// Source rows per similarity block.
    pub tile_rows: usize,
    /// Highest step at which projection runs; `None` means from the start.
    pub start_step: Option<usize>,
    /// Lowest step at which projection runs; `None` means to the end.
    pub stop_step: Option<usize>,
    /// Grid of descriptors and field. Defaults to the finest tapped layer.
    pub working_resolution: Option<(usize, usize)>,
    /// Feature layers to describe. Defaults to the backend's choice.
    pub feature_layers: Option<Vec<LayerId>>,
    pub scope: ApaScope,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            enabled: true,
            pca_dims: 64,
            pca_fit: PcaFitMode::PerStep,
            radius: 4,
            region_prior: true,
            tile_rows: 256,
            start_step: None,
            stop_step: None,
            working_resolution: None,
            feature_layers: None,
            scope: ApaScope::AllBranches,
        }
    }
}

impl ProjectionConfig {
    pub fn disabled() -> Self {
        ProjectionConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pca_dims == 0 {
            return Err(Error::Config("pca_dims must be positive".into()));
        }
        if self.tile_rows == 0 {
            return Err(Error::Config("tile_rows must be positive".into()));
        }
        if let (Some(a), Some(b)) = (self.start_step, self.stop_step) {
            if b > a {
                return Err(Error::Config(format!(
                    "projection stop_step {b} is above start_step {a}"
                )));
            }
        }
        if let Some((h, w)) = self.working_resolution {
            if h == 0 || w == 0 {
                return Err(Error::Config("working_resolution must be non-empty".into()));
            }
        }
        Ok(())
    }

    pub fn active(&self, t: usize) -> bool {
        self.enabled
            && self.start_step.is_none_or(|s| t <= s)
            && self.stop_step.is_none_or(|s| t >= s)
    }

    pub fn layers(&self, denoiser: &dyn Denoiser) -> Vec<LayerId> {
        self.feature_layers
            .clone()
            .unwrap_or_else(|| denoiser.default_feature_taps())
    }

    pub fn resolution(&self, denoiser: &dyn Denoiser) -> Result<(usize, usize)> {
        if let Some(r) = self.working_resolution {
            return Ok(r);
        }
        let mut best = None;
        for layer in self.layers(denoiser) {
            let g = denoiser.layer_grid(&layer)?;
            if best.is_none_or(|(h, w): (usize, usize)| g.0 * g.1 > h * w) {
                best = Some(g);
            }
        }
        best.ok_or_else(|| Error::Config("no feature layers to project with".into()))
    }
}

/// Row-major grid of k-dimensional descriptors, one row per location.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptors {
    pub grid: (usize, usize),
    pub data: Array2<f64>,
}

impl Descriptors {
    pub fn new(grid: (usize, usize), data: Array2<f64>) -> Result<Self> {
        if data.nrows() != grid.0 * grid.1 {
            return Err(Error::Contract(format!(
                "{} descriptor rows for a {}x{} grid",
                data.nrows(),
                grid.0,
                grid.1
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("descriptors must be finite".into()));
        }
        Ok(Descriptors { grid, data })
    }

    pub fn dims(&self) -> usize {
        self.data.ncols()
    }
}

/// Resample every tapped map to `resolution` and stack channels per location.
pub fn concat_features(
    features: &IndexMap<LayerId, Array3<f64>>,
    resolution: (usize, usize),
) -> Array2<f64> {
    let (h, w) = resolution;
    let total: usize = features.values().map(|f| f.dim().0).sum();
    let mut out = Array2::zeros((h * w, total));
    let mut col = 0;
    for fmap in features.values() {
        for channel in fmap.axis_iter(Axis(0)) {
            let r = bilinear_resample(channel, h, w);
            out.column_mut(col)
                .assign(&r.into_shape_with_order(h * w).expect("h*w"));
            col += 1;
        }
    }
    out
}

/// PCA-reduced descriptors for both branches, fitted jointly unless `fit` is given.
pub fn extract_descriptors(
    source: &IndexMap<LayerId, Array3<f64>>,
    target: &IndexMap<LayerId, Array3<f64>>,
    resolution: (usize, usize),
    pca_dims: usize,
    fit: Option<&PcaFit>,
) -> Result<(Descriptors, Descriptors, PcaFit)> {
    if !source.keys().eq(target.keys()) {
        return Err(Error::Contract(
            "source and target branches tapped different feature layers".into(),
        ));
    }
    let src = concat_features(source, resolution);
    let tar = concat_features(target, resolution);
    let fit = match fit {
        Some(f) => f.clone(),
        None => {
            let both = ndarray::concatenate(Axis(0), &[src.view(), tar.view()])
                .expect("same column count");
            PcaFit::fit(&both, pca_dims)?
        }
    };
    Ok((
        Descriptors::new(resolution, fit.transform(&src)?)?,
        Descriptors::new(resolution, fit.transform(&tar)?)?,
        fit,
    ))
}

/// Cosine similarity with source locations as rows and target locations as
/// columns, filled `tile_rows` rows at a time. Every entry is computed the same
/// way whatever the tiling, so results are bit-identical across tile sizes.
pub fn similarity_matrix(src: &Descriptors, tar: &Descriptors, tile_rows: usize) -> Result<Array2<f64>> {
    if src.dims() != tar.dims() {
        return Err(Error::Contract(format!(
            "descriptor dims differ: {} vs {}",
            src.dims(),
            tar.dims()
        )));
    }
    let norms = |d: &Array2<f64>| -> Vec<f64> {
        d.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
    };
    let (ns, nt) = (norms(&src.data), norms(&tar.data));
    let (rows, cols) = (src.data.nrows(), tar.data.nrows());
    let tile = tile_rows.max(1);
    let blocks: Vec<Vec<f64>> = (0..rows.div_ceil(tile))
        .into_par_iter()
        .map(|b| {
            let mut block = Vec::with_capacity(tile * cols);
            for i in b * tile..((b + 1) * tile).min(rows) {
                let s = src.data.row(i);
                for j in 0..cols {
                    block.push(s.dot(&tar.data.row(j)) / (ns[i] * nt[j] + COSINE_EPS));
                }
            }
            block
        })
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), blocks.concat()).expect("rows * cols"))
}

/// For each target location, the index of its matched source location.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionField {
    pub grid: (usize, usize),
    pub indices: Vec<usize>,
}

impl ProjectionField {
    pub fn identity(grid: (usize, usize)) -> Self {
        ProjectionField {
            grid,
            indices: (0..grid.0 * grid.1).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.indices.iter().enumerate().all(|(j, &i)| i == j)
    }

    /// Transfer the field onto another grid. Each cell follows the match of
    /// the field cell containing it and keeps its offset within that cell.
    pub fn resample(&self, grid: (usize, usize)) -> ProjectionField {
        if grid == self.grid {
            return self.clone();
        }
        let (fh, fw) = self.grid;
        let (gh, gw) = grid;
        // field cell containing fine coordinate i, and the offset inside it
        let split = |i: usize, fine: usize, coarse: usize| {
            let p = (i as f64 + 0.5) * coarse as f64 / fine as f64;
            let c = (p.floor() as usize).min(coarse - 1);
            (c, p - c as f64)
        };
        let place = |c: usize, frac: f64, fine: usize, coarse: usize| {
            (((c as f64 + frac) * fine as f64 / coarse as f64) as usize).min(fine - 1)
        };
        let indices = (0..gh * gw)
            .map(|j| {
                let (cy, fy) = split(j / gw, gh, fh);
                let (cx, fx) = split(j % gw, gw, fw);
                let src = self.indices[cy * fw + cx];
                place(src / fw, fy, gh, fh) * gw + place(src % fw, fx, gw, fw)
            })
            .collect();
        ProjectionField { grid, indices }
    }
}

fn argmax_column(sim: ArrayView2<'_, f64>, j: usize, allowed: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in allowed {
        let v = sim[[i, j]];
        // strict comparison keeps the lowest index on ties
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Column-wise argmax of `sim`, ties going to the lowest source index.
pub fn projection_field(sim: &Array2<f64>, grid: (usize, usize)) -> Result<ProjectionField> {
    if sim.ncols() != grid.0 * grid.1 || sim.nrows() != grid.0 * grid.1 {
        return Err(Error::Contract(format!(
            "similarity is {:?}, grid {}x{}",
            sim.dim(),
            grid.0,
            grid.1
        )));
    }
    if sim.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("similarity matrix is not finite".into()));
    }
    let indices = (0..sim.ncols())
        .into_par_iter()
        .map(|j| argmax_column(sim.view(), j, 0..sim.nrows()).expect("non-empty grid"))
        .collect();
    Ok(ProjectionField { grid, indices })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrectedField {
    pub field: ProjectionField,
    /// Target cells whose restriction set was empty and kept the raw match.
    pub fallbacks: Vec<usize>,
}

/// Apply the layout priors: background maps to itself, object cells match
/// only inside that object's source mask, uncovered cells only inside the band.
pub fn correct_projection_field(
    field: &ProjectionField,
    sim: &Array2<f64>,
    decomp: &RegionDecomposition,
) -> Result<CorrectedField> {
    if decomp.grid != field.grid || sim.ncols() != field.indices.len() {
        return Err(Error::Contract(format!(
            "field grid {:?} does not match decomposition grid {:?}",
            field.grid, decomp.grid
        )));
    }
    let flat = |m: &Array2<bool>| -> Vec<usize> {
        m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    };
    let object_cells: Vec<Vec<usize>> = decomp.source_masks.iter().map(flat).collect();
    let band_cells = flat(&decomp.band);
    let labels: Vec<RegionLabel> = decomp.labels.iter().copied().collect();

    let resolved: Vec<(usize, bool)> = (0..labels.len())
        .into_par_iter()
        .map(|j| {
            let allowed = match labels[j] {
                RegionLabel::Background => return (j, false),
                RegionLabel::Foreground(i) => &object_cells[i],
                RegionLabel::Uncertain => &band_cells,
            };
            match argmax_column(sim.view(), j, allowed.iter().copied()) {
                Some(i) => (i, false),
                None => (field.indices[j], true),
            }
        })
        .collect();

    let mut fallbacks = Vec::new();
    let mut indices = Vec::with_capacity(resolved.len());
    for (j, (i, fell_back)) in resolved.into_iter().enumerate() {
        if fell_back {
            log::warn!(
                "projection cell {j} ({:?}) has an empty restriction set; keeping unrestricted match {i}",
                labels[j]
            );
            fallbacks.push(j);
        }
        indices.push(i);
    }
    Ok(CorrectedField {
        field: ProjectionField {
            grid: field.grid,
            indices,
        },
        fallbacks,
    })
}

/// Gather rows: `out[j] = values[field[j]]`.
pub fn warp(values: ArrayView2<'_, f64>, field: &ProjectionField) -> Result<Array2<f64>> {
    if let Some(&bad) = field.indices.iter().find(|&&i| i >= values.nrows()) {
        return Err(Error::Contract(format!(
            "field index {bad} out of range for {} rows",
            values.nrows()
        )));
    }
    Ok(values.select(Axis(0), &field.indices))
}

/// `softmax(Q Kᵀ / √d) · V_projected`, with `d` the query width.
pub fn apa_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v_projected: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() || k.nrows() != v_projected.nrows() {
        return Err(Error::Contract(format!(
            "incompatible attention shapes q{:?} k{:?} v{:?}",
            q.dim(),
            k.dim(),
            v_projected.dim()
        )));
    }
    let scale = 1.0 / (q.ncols().max(1) as f64).sqrt();
    let mut logits = q.dot(&k.t()) * scale;
    for mut row in logits.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    Ok(logits.dot(&v_projected))
}

/// Value arrays seen during a pass, keyed by self-attention layer.
pub type CapturedValues = Arc<Mutex<IndexMap<LayerId, Array2<f64>>>>;

/// An intervention that records V for every self-attention layer and leaves it unchanged.
pub fn capture_values() -> (AttentionIntervention, CapturedValues) {
    let store: CapturedValues = Arc::default();
    let sink = store.clone();
    let iv = AttentionIntervention::new(LayerSelector::All, move |call| {
        sink.lock()
            .expect("capture lock")
            .insert(call.layer.clone(), call.value.to_owned());
        None
    });
    (iv, store)
}

/// One intervention per layer replacing V by the source values warped through `field`.
pub fn warped_value_interventions(
    values: &IndexMap<LayerId, Array2<f64>>,
    field: &ProjectionField,
    denoiser: &dyn Denoiser,
) -> Result<Vec<AttentionIntervention>> {
    let mut out = Vec::with_capacity(values.len());
    for (layer, v) in values {
        let grid = denoiser.layer_grid(layer)?;
        let warped = Arc::new(warp(v.view(), &field.resample(grid))?);
        out.push(AttentionIntervention::new(
            LayerSelector::Only(vec![layer.clone()]),
            move |_| Some((*warped).clone()),
        ));
    }
    Ok(out)
}

/// Everything the projection produced at one denoising step.
#[derive(Clone, Debug)]
pub struct ProjectionStep {
    pub raw: ProjectionField,
    pub corrected: CorrectedField,
    pub interventions: Vec<AttentionIntervention>,
}

/// Run the source replay pass and a target feature pass at step `t`, then
/// build the warped-value interventions for the target branch. `prompts`
/// holds the source and target prompts.
///
/// `fit_state` carries the PCA fit between steps when fitting once.
#[allow(clippy::too_many_arguments)]
pub fn project_step(
    denoiser: &dyn Denoiser,
    source_latent: &Latent,
    target_latent: &Latent,
    t: usize,
    prompts: (&str, &str),
    decomp: &RegionDecomposition,
    config: &ProjectionConfig,
    fit_state: &mut Option<PcaFit>,
) -> Result<ProjectionStep> {
    let layers = config.layers(denoiser);
    let resolution = config.resolution(denoiser)?;
    if decomp.grid != resolution {
        return Err(Error::Contract(format!(
            "regions built on {:?}, projection works on {:?}",
            decomp.grid, resolution
        )));
    }
    let taps = TapConfig {
        cross_attention: false,
        features: layers,
    };
    let (capture, captured) = capture_values();
    let src_out = denoiser.predict_noise(source_latent, t, prompts.0, &taps, &[capture])?;
    let tar_out = denoiser.predict_noise(target_latent, t, prompts.1, &taps, &[])?;

    let reuse = match config.pca_fit {
        PcaFitMode::Once => fit_state.as_ref(),
        PcaFitMode::PerStep => None,
    };
    let (src, tar, fit) =
        extract_descriptors(&src_out.features, &tar_out.features, resolution, config.pca_dims, reuse)?;
    if config.pca_fit == PcaFitMode::Once && fit_state.is_none() {
        *fit_state = Some(fit);
    }
    let sim = similarity_matrix(&src, &tar, config.tile_rows)?;
    let raw = projection_field(&sim, resolution)?;
    let corrected = if config.region_prior {
        correct_projection_field(&raw, &sim, decomp)?
    } else {
        CorrectedField {
            field: raw.clone(),
            fallbacks: Vec::new(),
        }
    };
    let values = std::mem::take(&mut *captured.lock().expect("capture lock"));
    let interventions = warped_value_interventions(&values, &corrected.field, denoiser)?;
    Ok(ProjectionStep {
        raw,
        corrected,
        interventions,
    })
}

fn png_writer(path: &Path, w: u32, h: u32) -> Result<png::Encoder<'static, BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(png::Encoder::new(BufWriter::new(file), w, h))
}

fn png_err(path: &Path, e: png::EncodingError) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Write a field as a 16-bit grayscale image of source indices.
pub fn write_field_png(path: &Path, field: &ProjectionField) -> Result<()> {
    if field.indices.iter().any(|&i| i > u16::MAX as usize) {
        return Err(Error::Config("field too large for a 16-bit index image".into()));
    }
    let (h, w) = field.grid;
    let mut enc = png_writer(path, w as u32, h as u32)?;
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let bytes: Vec<u8> = field
        .indices
        .iter()
        .flat_map(|&i| (i as u16).to_be_bytes())
        .collect();
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))
}

/// Read back an index image written by [`write_field_png`].
pub fn read_field_png(path: &Path) -> Result<ProjectionField> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut buf = vec![0; reader.output_buffer_size().expect("bounded image")];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Grayscale {
        return Err(Error::Config(format!("{} is not a 16-bit index image", path.display())));
    }
    let indices = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as usize)
        .collect();
    Ok(ProjectionField {
        grid: (info.height as usize, info.width as usize),
        indices,
    })
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

/// Indexed-color dump: 0 background (black), 1 uncertain (grey), 2.. objects.
pub fn write_regions_png(path: &Path, decomp: &RegionDecomposition) -> Result<()> {
    let (h, w) = decomp.grid;
    let n = decomp.object_ids.len();
    if n + 2 > 256 {
        return Err(Error::Config("too many objects for an indexed image".into()));
    }
    let mut palette = vec![0, 0, 0, 128, 128, 128];
    for i in 0..n {
        palette.extend_from_slice(&PALETTE[i % PALETTE.len()]);
    }
    let mut enc = png_writer(path, w as u32, h as u32)?;
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette);
    let data: Vec<u8> = decomp
        .labels
        .iter()
        .map(|l| match l {
            RegionLabel::Background => 0,
            RegionLabel::Uncertain => 1,
            RegionLabel::Foreground(i) => (i + 2) as u8,
        })
        .collect();
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&data).map_err(|e| png_err(path, e))
}
