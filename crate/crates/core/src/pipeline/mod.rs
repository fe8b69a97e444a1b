//! End-to-end editing: source inversion and replay, guided async editing of
//! the target branch with appearance projection, and run manifests.

mod backends;
mod manifest;
pub mod validate;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use backends::{
    toy_backend, toy_vocabulary, AdapterFactory, BackendRequest, BackendSelector, Backends,
    TOY_CHANNELS, TOY_LAYERS,
};
pub use manifest::{reproduce, sha256_hex, RunManifest, MANIFEST_FORMAT};
pub use validate::{validate_layout_pair, validate_options, validate_spec, Finding, Severity};

use crate::appearance_projection::{
    decompose_regions, project_step, write_field_png, write_regions_png, PcaFit, ProjectionConfig,
};
use crate::async_editor::{editing_step, EditorConfig, StepContext, StepReport};
use crate::backend::{ddim_invert_trace, Denoiser, InversionConfig, Latent, Trainable};
use crate::concept_learning::{
    compose_prompt, learn_stage1_embeddings, learn_stage2_finetune, load_bundle,
    prepare_concepts, save_bundle, ConceptBundle, ConceptConfig, DEFAULT_TEMPLATE,
};
use crate::error::{Error, Result};
use crate::layout::LayoutSpec;
use crate::layout_guidance::{
    attention_resolution, object_attention_maps, region_losses, GuidanceConfig, LossRecord,
    ObjectTarget,
};
use crate::noise_init::{composite_image, lfin_noise, random_noise, InitMode, LfinConfig};

/// Everything that shapes an edit apart from the inputs themselves.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditOptions {
    pub guidance: GuidanceConfig,
    pub init: InitMode,
    pub lfin: LfinConfig,
    pub projection: ProjectionConfig,
    pub editor: EditorConfig,
    pub inversion: InversionConfig,
    pub seed: u64,
}

/// A complete edit job as stored on disk. Relative paths resolve against
/// the directory of the spec file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditJobSpec {
    pub source_image: PathBuf,
    pub source_layout: PathBuf,
    pub target_layout: PathBuf,
    /// Concept bundle directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concepts: Option<PathBuf>,
    /// Learn concepts before editing when no bundle is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learn_concepts: Option<ConceptConfig>,
    #[serde(default)]
    pub backend: BackendSelector,
    #[serde(flatten)]
    pub options: EditOptions,
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub debug_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub telemetry: Option<PathBuf>,
}

impl EditJobSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: EditJobSpec = serde_json::from_str(&text)?;
        spec.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(spec)
    }

    /// Make every relative path relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.source_image);
        fix(&mut self.source_layout);
        fix(&mut self.target_layout);
        fix(&mut self.output);
        for p in [&mut self.concepts, &mut self.debug_dir, &mut self.telemetry].into_iter().flatten() {
            fix(p);
        }
    }

    /// Manifest path written next to the output image.
    pub fn manifest_path(&self) -> PathBuf {
        self.output.with_extension("manifest.json")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectLoss {
    pub object_id: String,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProgressEvent {
    Started {
        start_step: usize,
        total_steps: usize,
    },
    Step {
        /// 1-based position in the run.
        index: usize,
        t: usize,
        total_steps: usize,
        guided: bool,
        losses: Vec<ObjectLoss>,
        /// PNG of the decoded current latent, when the sink asked for one.
        #[serde(skip)]
        preview: Option<Vec<u8>>,
    },
    Finished {
        output_hash: String,
    },
}

/// Receives ordered progress events from a run.
pub trait ProgressSink: Send {
    fn emit(&mut self, event: ProgressEvent);

    /// Decode a preview every this many steps.
    fn preview_every(&self) -> Option<usize> {
        None
    }
}

impl ProgressSink for () {
    fn emit(&mut self, _: ProgressEvent) {}
}

impl ProgressSink for Vec<ProgressEvent> {
    fn emit(&mut self, event: ProgressEvent) {
        self.push(event);
    }
}

/// Cooperative cancellation, checked between denoising steps.
#[derive(Clone, Debug, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// In-memory inputs of one edit.
pub struct EditRequest<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub source_latent: &'a Latent,
    /// Needed for the composite of layout-friendly initialization.
    pub source_image: Option<&'a RgbImage>,
    pub source_layout: &'a LayoutSpec,
    pub target_layout: &'a LayoutSpec,
    pub concepts: Option<&'a ConceptBundle>,
    pub options: &'a EditOptions,
    pub debug_dir: Option<&'a Path>,
}

#[derive(Clone, Debug)]
pub struct EditResult {
    pub latent: Latent,
    pub start_step: usize,
    pub source_prompt: String,
    pub target_prompt: String,
    pub initial_losses: Vec<f64>,
    pub final_losses: Vec<f64>,
    /// Aggregated attention per target object on the final latent.
    pub final_attention: Vec<Array2<f64>>,
    pub steps: Vec<StepReport>,
    /// SHA-256 of the shared latent after every step.
    pub latent_hashes: Vec<String>,
    pub projection_fallbacks: usize,
}

/// Prompt over `layout` in layout order plus each object's token positions.
pub fn layout_prompt(layout: &LayoutSpec, concepts: Option<&ConceptBundle>) -> Result<(String, Vec<Vec<usize>>)> {
    let template = concepts.map_or(DEFAULT_TEMPLATE, |b| b.training.config.template.as_str());
    let mut parts = Vec::with_capacity(layout.objects.len());
    for obj in &layout.objects {
        let token = match concepts {
            Some(b) => Some(
                b.concept(&obj.id)
                    .ok_or_else(|| Error::Bundle(format!("bundle has no concept for `{}`", obj.id)))?
                    .token
                    .as_str(),
            ),
            None => None,
        };
        parts.push((token, obj.token.as_str()));
    }
    Ok(compose_prompt(template, &parts))
}

fn guidance_targets(
    layout: &LayoutSpec,
    positions: &[Vec<usize>],
    resolution: (usize, usize),
) -> Vec<ObjectTarget> {
    layout
        .objects
        .iter()
        .zip(positions)
        .enumerate()
        .map(|(i, (obj, pos))| {
            let mut token_positions = pos.clone();
            token_positions.dedup();
            ObjectTarget {
                object_id: obj.id.clone(),
                token_positions,
                mask: layout.mask_at(i, resolution.0, resolution.1),
            }
        })
        .collect()
}

fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Run the editing loop on in-memory inputs.
pub fn run_edit(req: &EditRequest<'_>, sink: &mut dyn ProgressSink, cancel: &CancelToken) -> Result<EditResult> {
    let d = req.denoiser;
    let opts = req.options;
    let findings: Vec<Finding> = validate_layout_pair(req.source_layout, req.target_layout)
        .into_iter()
        .chain(validate_options(opts))
        .filter(Finding::is_error)
        .collect();
    if !findings.is_empty() {
        return Err(Error::Validation(findings));
    }
    let num_steps = d.schedule().num_steps();
    let shape = d.latent_shape();
    let (_, lh, lw) = shape;
    if req.source_latent.shape() != shape {
        return Err(Error::Backend(format!(
            "source latent {:?} does not fit backend shape {shape:?}",
            req.source_latent.shape()
        )));
    }

    let (source_prompt, _) = layout_prompt(req.source_layout, req.concepts)?;
    let (target_prompt, positions) = layout_prompt(req.target_layout, req.concepts)?;

    let trace = ddim_invert_trace(d, req.source_latent, &source_prompt, 1.0, &opts.inversion)?;

    let (mut latent, start) = match opts.init {
        InitMode::Random => (random_noise(opts.seed, shape), num_steps),
        InitMode::SourceInversion => (trace.last().clone(), trace.last_step()),
        InitMode::Lfin => {
            let image = req.source_image.ok_or_else(|| {
                Error::Config("layout-friendly initialization needs the source image".into())
            })?;
            let composite = composite_image(image, req.source_layout, req.target_layout, opts.lfin.fill)?;
            let composite = d.encode(&composite)?;
            let mask = opts.lfin.mask_aware.then(|| req.target_layout.union_at(lh, lw));
            lfin_noise(d, &composite, &target_prompt, &opts.lfin, opts.seed, &opts.inversion, mask.as_ref())?
        }
    };

    let attn_res = attention_resolution(d, &opts.guidance)?;
    let targets = guidance_targets(req.target_layout, &positions, attn_res);
    for tg in targets.iter().filter(|tg| !tg.mask.iter().any(|&m| m)) {
        log::warn!(
            "target mask of `{}` vanishes on the {}x{} attention grid; its loss stays at 1",
            tg.object_id,
            attn_res.1,
            attn_res.0
        );
    }
    let fusion_masks: Vec<Array2<bool>> = (0..req.target_layout.objects.len())
        .map(|i| req.target_layout.mask_at(i, lh, lw))
        .collect();
    let decomp = if opts.projection.enabled {
        let res = opts.projection.resolution(d)?;
        Some(decompose_regions(req.source_layout, req.target_layout, res, opts.projection.radius)?)
    } else {
        None
    };
    if let Some(dir) = req.debug_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(dc) = &decomp {
            write_regions_png(&dir.join("regions.png"), dc)?;
        }
    }

    let initial_losses = if targets.is_empty() {
        Vec::new()
    } else {
        region_losses(d, &latent, start, &target_prompt, &targets, attn_res)?
    };

    let ctx = StepContext {
        denoiser: d,
        prompt: &target_prompt,
        targets: &targets,
        fusion_masks: &fusion_masks,
        guidance: &opts.guidance,
        editor: &opts.editor,
        attention_resolution: attn_res,
        start_step: start,
    };
    sink.emit(ProgressEvent::Started {
        start_step: start,
        total_steps: start,
    });
    let mut steps = Vec::with_capacity(start);
    let mut latent_hashes = Vec::with_capacity(start);
    let mut fit_state: Option<PcaFit> = None;
    let mut fallbacks = 0;
    for t in (1..=start).rev() {
        if cancel.is_cancelled() {
            return Err(Error::Cancelled(t));
        }
        let interventions = match &decomp {
            Some(dc) if opts.projection.active(t) => {
                let src_t = trace.get(t).ok_or_else(|| Error::Contract(format!("trace has no state {t}")))?;
                let proj = project_step(
                    d,
                    src_t,
                    &latent,
                    t,
                    (&source_prompt, &target_prompt),
                    dc,
                    &opts.projection,
                    &mut fit_state,
                )?;
                fallbacks += proj.corrected.fallbacks.len();
                if let Some(dir) = req.debug_dir {
                    write_field_png(&dir.join(format!("field_t{t:03}_raw.png")), &proj.raw)?;
                    write_field_png(&dir.join(format!("field_t{t:03}_corrected.png")), &proj.corrected.field)?;
                }
                proj.interventions
            }
            _ => Vec::new(),
        };
        let (next, report) = editing_step(&ctx, &latent, t, &interventions, opts.projection.scope)?;
        latent = next;
        latent_hashes.push(sha256_hex(&latent.to_le_bytes()));
        let index = start - t + 1;
        let preview = match sink.preview_every() {
            Some(n) if n > 0 && index % n == 0 => d.decode(&latent).ok().and_then(|img| encode_png(&img).ok()),
            _ => None,
        };
        sink.emit(ProgressEvent::Step {
            index,
            t,
            total_steps: start,
            guided: report.guided,
            losses: targets
                .iter()
                .zip(&report.losses)
                .map(|(tg, &loss)| ObjectLoss {
                    object_id: tg.object_id.clone(),
                    loss,
                })
                .collect(),
            preview,
        });
        steps.push(report);
    }

    let (final_losses, final_attention) = if targets.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        (
            region_losses(d, &latent, 0, &target_prompt, &targets, attn_res)?,
            object_attention_maps(d, &latent, 0, &target_prompt, &targets, attn_res)?
                .into_iter()
                .map(|a| a.into_map())
                .collect(),
        )
    };
    Ok(EditResult {
        latent,
        start_step: start,
        source_prompt,
        target_prompt,
        initial_losses,
        final_losses,
        final_attention,
        steps,
        latent_hashes,
        projection_fallbacks: fallbacks,
    })
}

/// Guidance telemetry rows from a run's step reports.
pub fn loss_records(result: &EditResult, layout: &LayoutSpec) -> Vec<LossRecord> {
    result
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.losses.is_empty())
        .map(|(i, s)| LossRecord {
            step: i + 1,
            object_losses: layout.ids().iter().map(|id| id.to_string()).zip(s.losses.iter().copied()).collect(),
            total: s.losses.iter().sum::<f64>() / s.losses.len() as f64,
        })
        .collect()
}

/// Decoded inputs of a job spec.
pub struct LoadedInputs {
    pub image: RgbImage,
    pub source: LayoutSpec,
    pub target: LayoutSpec,
}

pub fn load_inputs(spec: &EditJobSpec) -> Result<LoadedInputs> {
    let image = image::open(&spec.source_image)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&spec.source_image, io),
            other => Error::Image(other),
        })?
        .to_rgb8();
    let source = LayoutSpec::load(&spec.source_layout, None)?;
    let target = LayoutSpec::load(&spec.target_layout, Some(&source))?;
    Ok(LoadedInputs { image, source, target })
}

/// What [`edit_layout`] produced.
pub struct EditOutcome {
    pub image: RgbImage,
    pub manifest: RunManifest,
    pub result: EditResult,
    /// Bundle learned inline, if the spec asked for it.
    pub learned: Option<ConceptBundle>,
}

fn backend_for(spec: &EditJobSpec, backends: &Backends, inputs: &LoadedInputs) -> Result<Box<dyn Trainable>> {
    backends.create(
        &spec.backend,
        &BackendRequest {
            source_layout: &inputs.source,
            image_size: inputs.image.dimensions(),
        },
    )
}

fn train(denoiser: &mut dyn Trainable, latent: &Latent, layout: &LayoutSpec, config: &ConceptConfig) -> Result<ConceptBundle> {
    let (mut bundle, data) = prepare_concepts(denoiser, latent, layout, config)?;
    learn_stage1_embeddings(denoiser, &mut bundle, &data)?;
    learn_stage2_finetune(denoiser, &mut bundle, &data)?;
    Ok(bundle)
}

/// Learn concepts for every object of `layout` in `image` and save the bundle to `out`.
pub fn learn_concepts(
    image: &Path,
    layout: &Path,
    backend: &BackendSelector,
    config: &ConceptConfig,
    out: &Path,
    backends: &Backends,
) -> Result<ConceptBundle> {
    let img = image::open(image)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(image, io),
            other => Error::Image(other),
        })?
        .to_rgb8();
    let layout = LayoutSpec::load(layout, None)?;
    let errors: Vec<Finding> = layout.findings().into_iter().filter(Finding::is_error).collect();
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    let mut denoiser = backends.create(
        backend,
        &BackendRequest {
            source_layout: &layout,
            image_size: img.dimensions(),
        },
    )?;
    let latent = denoiser.encode(&img)?;
    let bundle = train(denoiser.as_mut(), &latent, &layout, config)?;
    save_bundle(&bundle, out)?;
    Ok(bundle)
}

/// Run a job spec end to end: load, optionally learn concepts, edit, decode,
/// and write the image, manifest, telemetry and debug dumps.
pub fn edit_layout(
    spec: &EditJobSpec,
    backends: &Backends,
    sink: &mut dyn ProgressSink,
    cancel: &CancelToken,
) -> Result<EditOutcome> {
    let errors: Vec<Finding> = validate_spec(spec).into_iter().filter(Finding::is_error).collect();
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    let inputs = load_inputs(spec)?;
    let mut denoiser = backend_for(spec, backends, &inputs)?;
    let source_latent = denoiser.encode(&inputs.image)?;

    let (bundle, learned) = match (&spec.concepts, &spec.learn_concepts) {
        (Some(path), _) => {
            let b = load_bundle(path, Some(&denoiser.backend_id()))?;
            b.apply(denoiser.as_mut())?;
            (Some(b), None)
        }
        (None, Some(cfg)) => {
            let b = train(denoiser.as_mut(), &source_latent, &inputs.source, cfg)?;
            (Some(b.clone()), Some(b))
        }
        (None, None) => (None, None),
    };

    let result = run_edit(
        &EditRequest {
            denoiser: denoiser.as_ref(),
            source_latent: &source_latent,
            source_image: Some(&inputs.image),
            source_layout: &inputs.source,
            target_layout: &inputs.target,
            concepts: bundle.as_ref(),
            options: &spec.options,
            debug_dir: spec.debug_dir.as_deref(),
        },
        sink,
        cancel,
    )?;
    let image = denoiser
        .decode(&result.latent)
        .map_err(|e| Error::Decode(e.to_string()))?;

    if let Some(parent) = spec.output.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let png = encode_png(&image)?;
    fs::write(&spec.output, &png).map_err(|e| Error::io(&spec.output, e))?;
    let output_hash = sha256_hex(&png);
    if let Some(path) = &spec.telemetry {
        let csv = crate::layout_guidance::telemetry_csv(&loss_records(&result, &inputs.target));
        fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    }
    let manifest = RunManifest::new(spec, denoiser.backend_id(), &inputs.target, &result, output_hash.clone())?;
    manifest.save(&spec.manifest_path())?;
    sink.emit(ProgressEvent::Finished { output_hash });
    Ok(EditOutcome {
        image,
        manifest,
        result,
        learned,
    })
}
