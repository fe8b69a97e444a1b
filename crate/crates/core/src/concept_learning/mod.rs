//! Per-object concept learning from a single image: one embedding per
//! object, then masked fine-tuning of the denoiser weights.

mod bundle;

use ndarray::{Array1, Array2, Array3, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bundle::{load_bundle, save_bundle, BundleManifest};

use crate::backend::{GradRequest, Latent, Trainable};
use crate::error::{Error, Result};
use crate::layout::LayoutSpec;
use crate::pipeline::validate::Finding;
use crate::rng::{standard_normal, substream};

pub const DEFAULT_TEMPLATE: &str = "a photo of {token} {noun}";

/// Masked mean squared error between `noise` and `predicted`, the mask
/// broadcast over channels. An empty mask gives 0.
pub fn masked_diffusion_loss(noise: &Latent, predicted: &Latent, mask: &Array2<bool>) -> Result<f64> {
    let (c, h, w) = check_shapes(noise, predicted, mask)?;
    let cells = mask.iter().filter(|&&m| m).count();
    if cells == 0 {
        log::warn!("masked diffusion loss on an empty mask");
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if mask[[y, x]] {
                    let d = noise.data()[[ch, y, x]] - predicted.data()[[ch, y, x]];
                    sum += d * d;
                }
            }
        }
    }
    Ok(sum / (c * cells).max(1) as f64)
}

/// Gradient of [`masked_diffusion_loss`] with respect to `predicted`.
pub fn masked_diffusion_loss_grad(noise: &Latent, predicted: &Latent, mask: &Array2<bool>) -> Result<Latent> {
    let (c, _, _) = check_shapes(noise, predicted, mask)?;
    let cells = mask.iter().filter(|&&m| m).count();
    let scale = -2.0 / (c * cells).max(1) as f64;
    let mut g = Array3::zeros(noise.shape());
    Zip::indexed(&mut g).for_each(|(ch, y, x), v| {
        if mask[[y, x]] {
            *v = scale * (noise.data()[[ch, y, x]] - predicted.data()[[ch, y, x]]);
        }
    });
    Latent::new(g)
}

fn check_shapes(a: &Latent, b: &Latent, mask: &Array2<bool>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = a.shape();
    if b.shape() != (c, h, w) || mask.dim() != (h, w) {
        return Err(Error::Contract(format!(
            "loss shapes disagree: {:?}, {:?}, mask {:?}",
            a.shape(),
            b.shape(),
            mask.dim()
        )));
    }
    Ok((c, h, w))
}

/// Which weight groups stage 2 updates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSelector {
    #[default]
    All,
    /// Only cross-attention key and value projections.
    CrossAttentionKv,
    Groups(Vec<String>),
}

impl ParamSelector {
    pub fn resolve(&self, available: &[String]) -> Result<Vec<String>> {
        let chosen: Vec<String> = match self {
            ParamSelector::All => available.to_vec(),
            ParamSelector::CrossAttentionKv => available
                .iter()
                .filter(|g| g.ends_with("attn2.to_k") || g.ends_with("attn2.to_v"))
                .cloned()
                .collect(),
            ParamSelector::Groups(names) => available.iter().filter(|g| names.contains(g)).cloned().collect(),
        };
        if chosen.is_empty() {
            return Err(Error::validation(Finding::error(
                "empty_selector",
                format!("parameter selector {self:?} matches no weight group"),
            )));
        }
        Ok(chosen)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConceptConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub embedding_lr: f64,
    pub weight_lr: f64,
    pub seed: u64,
    /// Must contain `{token}`; `{noun}` is replaced by the layout token phrase.
    pub template: String,
    pub selector: ParamSelector,
    /// Keep updating embeddings during stage 2.
    pub unfreeze_embeddings: bool,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        ConceptConfig {
            stage1_steps: 200,
            stage2_steps: 200,
            embedding_lr: 1e-2,
            weight_lr: 1e-3,
            seed: 0,
            template: DEFAULT_TEMPLATE.into(),
            selector: ParamSelector::All,
            unfreeze_embeddings: false,
        }
    }
}

impl ConceptConfig {
    /// Step counts and rates meant for full-size backends.
    pub fn real_backend() -> Self {
        ConceptConfig {
            stage1_steps: 500,
            stage2_steps: 300,
            embedding_lr: 5e-4,
            weight_lr: 1e-5,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.template.contains("{token}") {
            return Err(Error::Config("prompt template must contain {token}".into()));
        }
        if !(self.embedding_lr > 0.0 && self.weight_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One learned object concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub object_id: String,
    pub token: String,
    /// Class phrase from the layout, e.g. `cat`.
    pub noun: String,
    #[serde(skip)]
    pub embedding: Array1<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub config: ConceptConfig,
    /// Resolved stage-2 groups, empty if stage 2 has not run.
    pub stage2_groups: Vec<String>,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBundle {
    pub backend_id: String,
    pub concepts: Vec<Concept>,
    /// Backend-exported weights after stage 2.
    pub weights: Option<Vec<u8>>,
    pub training: TrainingRecord,
}

impl ConceptBundle {
    pub fn concept(&self, object_id: &str) -> Option<&Concept> {
        self.concepts.iter().find(|c| c.object_id == object_id)
    }

    pub fn prompt_for(&self, object_id: &str) -> Option<String> {
        self.concept(object_id)
            .map(|c| render_prompt(&self.training.config.template, &c.token, &c.noun))
    }

    /// One prompt naming every concept in `order`, e.g.
    /// `a photo of <a> cat and <b> pot`.
    pub fn joint_prompt(&self, order: &[&str]) -> Result<String> {
        let mut parts = Vec::with_capacity(order.len());
        for id in order {
            let c = self
                .concept(id)
                .ok_or_else(|| Error::Bundle(format!("bundle has no concept for `{id}`")))?;
            parts.push((Some(c.token.as_str()), c.noun.as_str()));
        }
        Ok(compose_prompt(&self.training.config.template, &parts).0)
    }

    /// Load weights and register concept tokens in `denoiser`.
    pub fn apply<D: Trainable + ?Sized>(&self, denoiser: &mut D) -> Result<()> {
        if denoiser.backend_id() != self.backend_id {
            return Err(Error::BackendMismatch {
                expected: self.backend_id.clone(),
                actual: denoiser.backend_id(),
            });
        }
        if let Some(w) = &self.weights {
            denoiser.import_weights(w)?;
        }
        for c in &self.concepts {
            if denoiser.has_token(&c.token) {
                denoiser.set_embedding(&c.token, c.embedding.clone())?;
            } else {
                denoiser.add_token(&c.token, c.embedding.clone())?;
            }
        }
        Ok(())
    }
}

pub fn render_prompt(template: &str, token: &str, noun: &str) -> String {
    template
        .replace("{token}", token)
        .replace("{noun}", noun)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Joint prompt over several `(placeholder, noun)` phrases joined by `and`,
/// with the template text around `{token} {noun}` kept once. Also returns,
/// per phrase, the word positions that carry the object: the placeholder if
/// there is one, else the noun words.
pub fn compose_prompt(template: &str, parts: &[(Option<&str>, &str)]) -> (String, Vec<Vec<usize>>) {
    let (prefix, rest) = template.split_once("{token}").unwrap_or(("", template));
    let suffix = rest.replacen("{noun}", "", 1);
    let mut words: Vec<String> = prefix.split_whitespace().map(str::to_string).collect();
    let mut positions = Vec::with_capacity(parts.len());
    for (i, (token, noun)) in parts.iter().enumerate() {
        if i > 0 {
            words.push("and".into());
        }
        let mut own = Vec::new();
        if let Some(tok) = token {
            own.push(words.len());
            words.push(tok.to_string());
        }
        for w in noun.split_whitespace() {
            if token.is_none() {
                own.push(words.len());
            }
            words.push(w.to_string());
        }
        positions.push(own);
    }
    words.extend(suffix.split_whitespace().map(str::to_string));
    (words.join(" "), positions)
}

/// Placeholder token for an object id: `<id>` lowercased, spaces as dashes.
pub fn placeholder_token(object_id: &str) -> String {
    format!("<{}>", object_id.to_lowercase().split_whitespace().collect::<Vec<_>>().join("-"))
}

/// Training inputs: the clean latent and one mask and prompt per object.
#[derive(Clone, Debug)]
pub struct ConceptData {
    pub latent: Latent,
    pub masks: Vec<Array2<bool>>,
    pub prompts: Vec<String>,
}

/// Register one placeholder token per layout object and build the training data.
///
/// New embeddings start at the mean embedding of the object's noun words.
pub fn prepare_concepts<D: Trainable + ?Sized>(
    denoiser: &mut D,
    latent: &Latent,
    layout: &LayoutSpec,
    config: &ConceptConfig,
) -> Result<(ConceptBundle, ConceptData)> {
    config.validate()?;
    let (_, h, w) = denoiser.latent_shape();
    let mut concepts = Vec::new();
    let mut data = ConceptData {
        latent: latent.clone(),
        masks: Vec::new(),
        prompts: Vec::new(),
    };
    for (i, obj) in layout.objects.iter().enumerate() {
        let token = placeholder_token(&obj.id);
        if denoiser.base_vocabulary().contains(&token) || concepts.iter().any(|c: &Concept| c.token == token) {
            return Err(Error::validation(
                Finding::error("token_clash", format!("placeholder `{token}` is not unique")).for_object(&obj.id),
            ));
        }
        let mask = layout.mask_at(i, h, w);
        if !mask.iter().any(|&m| m) {
            return Err(Error::validation(
                Finding::error("empty_mask", "mask vanishes at latent resolution").for_object(&obj.id),
            ));
        }
        let words = obj.words();
        let mut init = Array1::zeros(denoiser.embedding_dim());
        let known: Vec<Array1<f64>> = words.iter().filter_map(|w| denoiser.embedding(w)).collect();
        for e in &known {
            init += e;
        }
        if !known.is_empty() {
            init /= known.len() as f64;
        }
        if denoiser.has_token(&token) {
            denoiser.set_embedding(&token, init.clone())?;
        } else {
            denoiser.add_token(&token, init.clone())?;
        }
        let noun = words.join(" ");
        data.prompts.push(render_prompt(&config.template, &token, &noun));
        data.masks.push(mask);
        concepts.push(Concept {
            object_id: obj.id.clone(),
            token,
            noun,
            embedding: init,
        });
    }
    let bundle = ConceptBundle {
        backend_id: denoiser.backend_id(),
        concepts,
        weights: None,
        training: TrainingRecord {
            config: config.clone(),
            ..Default::default()
        },
    };
    Ok((bundle, data))
}

/// Plain Adam over a flat parameter vector.
#[derive(Clone, Debug)]
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

struct Sample {
    object: usize,
    t: usize,
    noise: Latent,
}

fn draw_sample(rng: &mut ChaCha8Rng, objects: usize, steps: usize, shape: (usize, usize, usize)) -> Sample {
    let object = rng.random_range(0..objects);
    let t = rng.random_range(1..=steps);
    let noise = Latent::from_array(standard_normal(rng, shape));
    Sample { object, t, noise }
}

fn noised<D: Trainable + ?Sized>(denoiser: &D, x0: &Latent, s: &Sample) -> Latent {
    let ab = denoiser.schedule().alpha_bar(s.t);
    Latent::from_array(x0.data() * ab.sqrt() + s.noise.data() * (1.0 - ab).sqrt())
}

fn check_data<D: Trainable + ?Sized>(denoiser: &D, bundle: &ConceptBundle, data: &ConceptData) -> Result<()> {
    if data.masks.len() != bundle.concepts.len() || data.prompts.len() != bundle.concepts.len() {
        return Err(Error::Contract("one mask and prompt per concept required".into()));
    }
    for (c, prompt) in bundle.concepts.iter().zip(&data.prompts) {
        if !denoiser.tokenize(prompt)?.contains(&c.token) {
            return Err(Error::validation(
                Finding::error(
                    "missing_placeholder",
                    format!("prompt `{prompt}` does not contain `{}`", c.token),
                )
                .for_object(&c.object_id),
            ));
        }
    }
    if data.latent.shape() != denoiser.latent_shape() {
        return Err(Error::Contract("training latent has the wrong shape".into()));
    }
    Ok(())
}

/// Stage 1: learn each concept's embedding with the denoiser weights frozen.
pub fn learn_stage1_embeddings<D: Trainable + ?Sized>(
    denoiser: &mut D,
    bundle: &mut ConceptBundle,
    data: &ConceptData,
) -> Result<()> {
    check_data(denoiser, bundle, data)?;
    let config = bundle.training.config.clone();
    let mut rng = substream(config.seed, "training.stage1");
    let dim = denoiser.embedding_dim();
    let mut optim: Vec<Adam> = bundle.concepts.iter().map(|_| Adam::new(config.embedding_lr, dim)).collect();
    let shape = denoiser.latent_shape();
    let steps = denoiser.schedule().num_steps();
    for _ in 0..config.stage1_steps {
        let s = draw_sample(&mut rng, bundle.concepts.len(), steps, shape);
        let (loss, grads) = loss_and_grads(
            denoiser,
            data,
            &s,
            GradRequest {
                embeddings: vec![bundle.concepts[s.object].token.clone()],
                parameters: Vec::new(),
            },
        )?;
        let concept = &mut bundle.concepts[s.object];
        let g = &grads.embeddings[&concept.token];
        let mut e = concept.embedding.to_vec();
        optim[s.object].step(&mut e, g.as_slice().expect("contiguous"));
        concept.embedding = Array1::from(e);
        denoiser.set_embedding(&concept.token, concept.embedding.clone())?;
        bundle.training.stage1_losses.push(loss);
    }
    Ok(())
}

/// Stage 2: fine-tune the selected weight groups with the masked loss.
pub fn learn_stage2_finetune<D: Trainable + ?Sized>(
    denoiser: &mut D,
    bundle: &mut ConceptBundle,
    data: &ConceptData,
) -> Result<()> {
    check_data(denoiser, bundle, data)?;
    let config = bundle.training.config.clone();
    let groups = config.selector.resolve(&denoiser.parameter_groups())?;
    bundle.training.stage2_groups = groups.clone();
    let mut rng = substream(config.seed, "training.stage2");
    let mut optim: Vec<Adam> = groups
        .iter()
        .map(|g| Adam::new(config.weight_lr, denoiser.parameter(g).map_or(0, |p| p.len())))
        .collect();
    let mut embed_optim: Vec<Adam> = bundle
        .concepts
        .iter()
        .map(|_| Adam::new(config.embedding_lr, denoiser.embedding_dim()))
        .collect();
    let shape = denoiser.latent_shape();
    let steps = denoiser.schedule().num_steps();
    for _ in 0..config.stage2_steps {
        let s = draw_sample(&mut rng, bundle.concepts.len(), steps, shape);
        let token = bundle.concepts[s.object].token.clone();
        let request = GradRequest {
            embeddings: if config.unfreeze_embeddings { vec![token.clone()] } else { Vec::new() },
            parameters: groups.clone(),
        };
        let (loss, grads) = loss_and_grads(denoiser, data, &s, request)?;
        for (g, opt) in groups.iter().zip(optim.iter_mut()) {
            let params = denoiser
                .parameter_mut(g)
                .ok_or_else(|| Error::Backend(format!("weight group `{g}` vanished")))?;
            opt.step(params, &grads.parameters[g]);
        }
        if config.unfreeze_embeddings {
            let concept = &mut bundle.concepts[s.object];
            let mut e = concept.embedding.to_vec();
            embed_optim[s.object].step(&mut e, grads.embeddings[&token].as_slice().expect("contiguous"));
            concept.embedding = Array1::from(e);
            denoiser.set_embedding(&token, concept.embedding.clone())?;
        }
        bundle.training.stage2_losses.push(loss);
    }
    if config.stage2_steps > 0 {
        bundle.weights = Some(denoiser.export_weights());
    }
    Ok(())
}

fn loss_and_grads<D: Trainable + ?Sized>(
    denoiser: &D,
    data: &ConceptData,
    s: &Sample,
    request: GradRequest,
) -> Result<(f64, crate::backend::Gradients)> {
    let x_t = noised(denoiser, &data.latent, s);
    let prompt = &data.prompts[s.object];
    let pred = denoiser
        .predict_noise(&x_t, s.t, prompt, &crate::backend::TapConfig::none(), &[])?
        .noise;
    let mask = &data.masks[s.object];
    let loss = masked_diffusion_loss(&s.noise, &pred, mask)?;
    let upstream = masked_diffusion_loss_grad(&s.noise, &pred, mask)?;
    let grads = denoiser.noise_vjp(&x_t, s.t, prompt, &upstream, &request)?;
    Ok((loss, grads))
}

/// Average masked loss over `samples` draws per object from a fixed stream,
/// so the number is comparable before and after training. `masks` overrides
/// the training masks, e.g. with their complements.
pub fn evaluate_masked_loss<D: Trainable + ?Sized>(
    denoiser: &D,
    data: &ConceptData,
    masks: Option<&[Array2<bool>]>,
    seed: u64,
    samples: usize,
) -> Result<f64> {
    let masks = masks.unwrap_or(&data.masks);
    let mut rng = substream(seed, "training.eval");
    let steps = denoiser.schedule().num_steps();
    let mut total = 0.0;
    let mut n = 0;
    for object in 0..data.prompts.len() {
        for _ in 0..samples {
            let t = rng.random_range(1..=steps);
            let noise = Latent::from_array(standard_normal(&mut rng, denoiser.latent_shape()));
            let s = Sample { object, t, noise };
            let x_t = noised(denoiser, &data.latent, &s);
            let pred = denoiser
                .predict_noise(&x_t, t, &data.prompts[object], &crate::backend::TapConfig::none(), &[])?
                .noise;
            total += masked_diffusion_loss(&s.noise, &pred, &masks[object])?;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn lat(a: Array3<f64>) -> Latent {
        Latent::new(a).unwrap()
    }

    #[test]
    fn hand_scalar_case() {
        let noise = lat(array![[[1.0, 0.0], [0.0, 0.0]]]);
        let pred = lat(Array3::zeros((1, 2, 2)));
        let mask = array![[true, true], [false, false]];
        assert_eq!(masked_diffusion_loss(&noise, &pred, &mask).unwrap(), 0.5);
        assert_eq!(masked_diffusion_loss(&noise, &noise, &mask).unwrap(), 0.0);
        let empty = Array2::from_elem((2, 2), false);
        assert_eq!(masked_diffusion_loss(&noise, &pred, &empty).unwrap(), 0.0);
    }

    #[test]
    fn grad_matches_finite_difference() {
        let noise = lat(array![[[1.0, -0.5], [0.3, 2.0]], [[0.1, 0.2], [0.4, -1.0]]]);
        let pred = lat(array![[[0.2, 0.5], [-0.3, 1.0]], [[0.0, 0.7], [0.1, 0.0]]]);
        let mask = array![[true, false], [true, true]];
        let g = masked_diffusion_loss_grad(&noise, &pred, &mask).unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0), (1, 1, 0), (0, 0, 1), (1, 1, 1)] {
            let mut p = pred.data().clone();
            p[idx] += h;
            let up = masked_diffusion_loss(&noise, &lat(p.clone()), &mask).unwrap();
            p[idx] -= 2.0 * h;
            let down = masked_diffusion_loss(&noise, &lat(p), &mask).unwrap();
            assert!(((up - down) / (2.0 * h) - g.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn selector_resolution() {
        let groups: Vec<String> = ["mix", "dec.0.attn2.to_k", "dec.0.attn2.to_v", "dec.0.attn1.to_q"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(ParamSelector::All.resolve(&groups).unwrap().len(), 4);
        assert_eq!(ParamSelector::CrossAttentionKv.resolve(&groups).unwrap().len(), 2);
        assert!(matches!(
            ParamSelector::Groups(vec!["nope".into()]).resolve(&groups),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut a = Adam::new(0.1, 2);
        let mut p = vec![1.0, -1.0];
        a.step(&mut p, &[3.0, -0.001]);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-4);
    }

    #[test]
    fn prompts_and_placeholders() {
        assert_eq!(placeholder_token("Obj 1"), "<obj-1>");
        assert_eq!(render_prompt(DEFAULT_TEMPLATE, "<a>", "cat"), "a photo of <a> cat");
        let (p, pos) = compose_prompt(DEFAULT_TEMPLATE, &[(Some("<a>"), "cat"), (None, "red pot")]);
        assert_eq!(p, "a photo of <a> cat and red pot");
        assert_eq!(pos, vec![vec![3], vec![6, 7]]);
    }
}
