//! Deterministic analytic denoiser for desk-scale runs.
//!
//! Every block average-pools the latent to its own grid and then
//!
//! * cross-attends: token `p` gets key `k_p = K e_p` and value `v_p = V e_p`;
//!   its attention map is `softmax_u(τ ⟨k_p, x(u)⟩)` over spatial locations,
//! * self-attends over locations with linear `q/k/v/out` projections (the
//!   value array is what interventions replace),
//! * exposes `F x(u)` as its output feature map.
//!
//! The predicted noise is
//! `ε = s·sqrt(1 − ᾱ_t)·(M x + mean_b upsample(Y_b))` where `M` is a
//! contraction and `Y_b` is the block's attention output. All gradients
//! used by guidance and concept learning are written out by hand.

use image::RgbImage;
use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    AttentionIntervention, Denoiser, DenoiserOutput, GradRequest, Gradients, LayerId, LayerKind,
    LayerSelector, Latent, NoiseSchedule, PoolCodec, SelfAttentionCall, TapConfig, Trainable,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub vocab: Vec<String>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Pooling factor per block; its length is the number of blocks.
    pub block_scales: Vec<usize>,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub feature_dim: usize,
    /// Cross-attention logit scale τ.
    pub temperature: f64,
    /// Global multiplier on the predicted noise; 0 gives `ε ≡ 0`.
    pub noise_scale: f64,
    pub mix_gain: f64,
    pub cross_gain: f64,
    pub self_gain: f64,
    pub num_steps: usize,
    pub downsample: usize,
}

impl ToyConfig {
    pub fn new(seed: u64, vocab: Vec<String>, latent_shape: (usize, usize, usize), num_layers: usize) -> Self {
        let (channels, height, width) = latent_shape;
        let coarse = if height % 2 == 0 && width % 2 == 0 { 2 } else { 1 };
        let block_scales = (0..num_layers).map(|b| if b == 0 { coarse } else { 1 }).collect();
        ToyConfig {
            seed,
            vocab,
            channels,
            height,
            width,
            block_scales,
            embed_dim: 16,
            attn_dim: 8,
            feature_dim: 32,
            temperature: 1.0 / (channels as f64).sqrt(),
            noise_scale: 1.0,
            mix_gain: 0.9,
            cross_gain: 0.5,
            self_gain: 0.5,
            num_steps: 20,
            downsample: 8,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab.is_empty() {
            return Err(Error::Config("toy vocabulary must not be empty".into()));
        }
        if self.block_scales.is_empty() {
            return Err(Error::Config("toy denoiser needs at least one block".into()));
        }
        for &s in &self.block_scales {
            if s == 0 || !self.height.is_multiple_of(s) || !self.width.is_multiple_of(s) {
                return Err(Error::Config(format!(
                    "block scale {s} does not divide latent {}x{}",
                    self.height, self.width
                )));
            }
        }
        if self.channels < 3 {
            return Err(Error::Config("toy latent needs at least 3 channels".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockWeights {
    cross_k: Array2<f64>,
    cross_v: Array2<f64>,
    to_q: Array2<f64>,
    to_k: Array2<f64>,
    to_v: Array2<f64>,
    to_out: Array2<f64>,
    feature: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ToyWeights {
    embeddings: IndexMap<String, Array1<f64>>,
    mix: Array2<f64>,
    blocks: Vec<BlockWeights>,
}

#[derive(Serialize, Deserialize)]
struct ToyState {
    config: ToyConfig,
    weights: ToyWeights,
}

#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    config: ToyConfig,
    schedule: NoiseSchedule,
    codec: PoolCodec,
    weights: ToyWeights,
}

/// Toy denoiser with default dimensions for the given latent shape.
pub fn make_toy_denoiser(
    seed: u64,
    vocab: &[&str],
    latent_shape: (usize, usize, usize),
    num_layers: usize,
) -> Result<ToyDenoiser> {
    let vocab = vocab.iter().map(|s| s.to_string()).collect();
    ToyDenoiser::new(ToyConfig::new(seed, vocab, latent_shape, num_layers))
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn(shape, |_| normal.sample(rng))
}

fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let total = exp.sum();
    exp / total
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let sm = softmax(row.view());
        row.assign(&sm);
    }
    out
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Cached forward quantities of one block.
struct BlockPass {
    scale: usize,
    grid: (usize, usize),
    pooled: Array2<f64>,
    values: Vec<Array1<f64>>,
    attention: Vec<Array1<f64>>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Array2<f64>,
    o: Array2<f64>,
    output: Array2<f64>,
}

impl ToyDenoiser {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::scaled_linear(config.num_steps)?;
        let codec = PoolCodec::new(config.downsample, config.channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c, d, da, f) = (
            config.channels,
            config.embed_dim,
            config.attn_dim,
            config.feature_dim,
        );
        let mut embeddings = IndexMap::new();
        for token in &config.vocab {
            let e = gaussian(&mut rng, (1, d), 1.0).into_shape_with_order(d).expect("1xd");
            if embeddings.insert(token.clone(), e).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{token}`")));
            }
        }
        let mix = Array2::eye(c) * config.mix_gain + gaussian(&mut rng, (c, c), 0.05);
        let blocks = config
            .block_scales
            .iter()
            .map(|_| BlockWeights {
                cross_k: gaussian(&mut rng, (c, d), (1.0 / d as f64).sqrt()),
                cross_v: gaussian(&mut rng, (c, d), (0.25 / d as f64).sqrt()),
                to_q: gaussian(&mut rng, (da, c), (1.0 / c as f64).sqrt()),
                to_k: gaussian(&mut rng, (da, c), (1.0 / c as f64).sqrt()),
                to_v: gaussian(&mut rng, (da, c), (1.0 / c as f64).sqrt()),
                to_out: gaussian(&mut rng, (c, da), 0.5 / (da as f64).sqrt()),
                feature: gaussian(&mut rng, (f, c), (1.0 / c as f64).sqrt()),
            })
            .collect();
        Ok(ToyDenoiser {
            config,
            schedule,
            codec,
            weights: ToyWeights {
                embeddings,
                mix,
                blocks,
            },
        })
    }

    /// Rebuild from bytes produced by [`Trainable::export_weights`].
    pub fn from_weights(bytes: &[u8]) -> Result<Self> {
        let state: ToyState = serde_json::from_slice(bytes)
            .map_err(|e| Error::Backend(format!("corrupt toy weights: {e}")))?;
        let mut toy = ToyDenoiser::new(state.config)?;
        toy.weights = state.weights;
        Ok(toy)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn num_blocks(&self) -> usize {
        self.weights.blocks.len()
    }

    fn noise_gain(&self, t: usize) -> f64 {
        self.config.noise_scale * (1.0 - self.schedule.alpha_bar(t)).sqrt()
    }

    fn block_grid(&self, b: usize) -> (usize, usize) {
        let s = self.config.block_scales[b];
        (self.config.height / s, self.config.width / s)
    }

    fn check_latent(&self, latent: &Latent, t: usize) -> Result<()> {
        let expected = (self.config.channels, self.config.height, self.config.width);
        if latent.shape() != expected {
            return Err(Error::Contract(format!(
                "latent shape {:?} != backend shape {:?}",
                latent.shape(),
                expected
            )));
        }
        if t > self.schedule.num_steps() {
            return Err(Error::StepOutOfRange {
                t,
                min: 0,
                max: self.schedule.num_steps(),
            });
        }
        Ok(())
    }

    fn check_selector(&self, selector: &LayerSelector) -> Result<()> {
        if let LayerSelector::Only(ids) = selector {
            let known = self.self_attention_layers();
            for id in ids {
                if !known.contains(id) {
                    return Err(Error::Config(format!(
                        "intervention targets unknown self-attention layer `{id}`"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Average-pool to `[cells, channels]`, rows in row-major cell order.
    fn pool(&self, x: &Array3<f64>, scale: usize) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let wb = w / scale;
        let mut out = Array2::zeros(((h / scale) * wb, c));
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[(y / scale) * wb + xx / scale, ch]] += x[[ch, y, xx]];
                }
            }
        }
        out / (scale * scale) as f64
    }

    /// Adjoint of nearest-neighbour upsampling: sum each full-resolution
    /// `[c, h, w]` gradient into its pooled cell.
    fn pool_sum(&self, g: &Array3<f64>, scale: usize) -> Array2<f64> {
        self.pool(g, scale) * (scale * scale) as f64
    }

    fn token_embedding(&self, token: &str) -> Result<&Array1<f64>> {
        self.weights
            .embeddings
            .get(token)
            .ok_or_else(|| Error::Config(format!("token `{token}` not in vocabulary")))
    }

    fn forward_block(
        &self,
        b: usize,
        x: &Array3<f64>,
        tokens: &[String],
        t: usize,
        interventions: &[AttentionIntervention],
    ) -> Result<BlockPass> {
        let w = &self.weights.blocks[b];
        let scale = self.config.block_scales[b];
        let grid = self.block_grid(b);
        let pooled = self.pool(x, scale);
        let cells = pooled.nrows();
        let mut output = Array2::<f64>::zeros((cells, self.config.channels));

        let mut values = Vec::with_capacity(tokens.len());
        let mut attention = Vec::with_capacity(tokens.len());
        let coef = self.config.cross_gain * cells as f64 / tokens.len() as f64;
        for token in tokens {
            let e = self.token_embedding(token)?;
            let k = w.cross_k.dot(e);
            let v = w.cross_v.dot(e);
            let a = softmax((pooled.dot(&k) * self.config.temperature).view());
            output += &(outer(&a, &v) * coef);
            values.push(v);
            attention.push(a);
        }

        let q = pooled.dot(&w.to_q.t());
        let k = pooled.dot(&w.to_k.t());
        let mut v = pooled.dot(&w.to_v.t());
        let layer = LayerId::new(b, LayerKind::SelfAttention);
        for iv in interventions.iter().filter(|iv| iv.selector.matches(&layer)) {
            let call = SelfAttentionCall {
                layer: &layer,
                query: q.view(),
                key: k.view(),
                value: v.view(),
                t,
                grid,
            };
            if let Some(replacement) = (iv.hook)(&call) {
                if replacement.dim() != v.dim() {
                    return Err(Error::Contract(format!(
                        "intervention on {layer} returned shape {:?}, expected {:?}",
                        replacement.dim(),
                        v.dim()
                    )));
                }
                v = replacement;
            }
        }
        let probs = softmax_rows(&(q.dot(&k.t()) / (self.config.attn_dim as f64).sqrt()));
        let o = probs.dot(&v);
        output += &(o.dot(&w.to_out.t()) * self.config.self_gain);

        Ok(BlockPass {
            scale,
            grid,
            pooled,
            values,
            attention,
            q,
            k,
            v,
            probs,
            o,
            output,
        })
    }

    fn forward(
        &self,
        latent: &Latent,
        t: usize,
        tokens: &[String],
        interventions: &[AttentionIntervention],
    ) -> Result<(Array3<f64>, Vec<BlockPass>)> {
        let x = latent.data();
        let (c, h, w) = x.dim();
        let flat = x.to_shape((c, h * w)).expect("contiguous latent");
        let mut eps = self
            .weights
            .mix
            .dot(&flat)
            .into_shape_with_order((c, h, w))
            .expect("c*h*w");
        let inv_blocks = 1.0 / self.num_blocks() as f64;
        let mut passes = Vec::with_capacity(self.num_blocks());
        for b in 0..self.num_blocks() {
            let pass = self.forward_block(b, x, tokens, t, interventions)?;
            let wb = pass.grid.1;
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let cell = (y / pass.scale) * wb + xx / pass.scale;
                        eps[[ch, y, xx]] += inv_blocks * pass.output[[cell, ch]];
                    }
                }
            }
            passes.push(pass);
        }
        eps *= self.noise_gain(t);
        Ok((eps, passes))
    }

    fn group_names(&self) -> Vec<String> {
        let mut names = vec!["mix".to_string()];
        for b in 0..self.num_blocks() {
            for p in ["attn1.to_q", "attn1.to_k", "attn1.to_v", "attn1.to_out", "attn2.to_k", "attn2.to_v"] {
                names.push(format!("dec.{b}.{p}"));
            }
        }
        names
    }

    fn group_array(&self, group: &str) -> Option<&Array2<f64>> {
        if group == "mix" {
            return Some(&self.weights.mix);
        }
        let rest = group.strip_prefix("dec.")?;
        let (b, name) = rest.split_once('.')?;
        let blk = self.weights.blocks.get(b.parse::<usize>().ok()?)?;
        Some(match name {
            "attn1.to_q" => &blk.to_q,
            "attn1.to_k" => &blk.to_k,
            "attn1.to_v" => &blk.to_v,
            "attn1.to_out" => &blk.to_out,
            "attn2.to_k" => &blk.cross_k,
            "attn2.to_v" => &blk.cross_v,
            _ => return None,
        })
    }

    fn group_array_mut(&mut self, group: &str) -> Option<&mut Array2<f64>> {
        if group == "mix" {
            return Some(&mut self.weights.mix);
        }
        let rest = group.strip_prefix("dec.")?;
        let (b, name) = rest.split_once('.')?;
        let blk = self.weights.blocks.get_mut(b.parse::<usize>().ok()?)?;
        Some(match name {
            "attn1.to_q" => &mut blk.to_q,
            "attn1.to_k" => &mut blk.to_k,
            "attn1.to_v" => &mut blk.to_v,
            "attn1.to_out" => &mut blk.to_out,
            "attn2.to_k" => &mut blk.cross_k,
            "attn2.to_v" => &mut blk.cross_v,
            _ => return None,
        })
    }
}

impl Denoiser for ToyDenoiser {
    fn backend_id(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(&self.config).expect("config serializes"));
        format!(
            "toy-v1:seed={}:{}x{}x{}:{}",
            self.config.seed,
            self.config.channels,
            self.config.height,
            self.config.width,
            &hex::encode(digest)[..12]
        )
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        (self.config.channels, self.config.height, self.config.width)
    }

    fn downsample_factor(&self) -> usize {
        self.config.downsample
    }

    fn tokenize(&self, prompt: &str) -> Result<Vec<String>> {
        let tokens: Vec<String> = prompt.split_whitespace().map(str::to_lowercase).collect();
        if tokens.is_empty() {
            return Err(Error::Config("prompt must not be empty".into()));
        }
        for tok in &tokens {
            self.token_embedding(tok)?;
        }
        Ok(tokens)
    }

    fn cross_attention_layers(&self) -> Vec<LayerId> {
        (0..self.num_blocks())
            .map(|b| LayerId::new(b, LayerKind::CrossAttention))
            .collect()
    }

    fn self_attention_layers(&self) -> Vec<LayerId> {
        (0..self.num_blocks())
            .map(|b| LayerId::new(b, LayerKind::SelfAttention))
            .collect()
    }

    fn feature_layers(&self) -> Vec<LayerId> {
        (0..self.num_blocks())
            .map(|b| LayerId::new(b, LayerKind::Output))
            .collect()
    }

    fn default_feature_taps(&self) -> Vec<LayerId> {
        let all = self.feature_layers();
        if all.len() >= 3 {
            all[1..3].to_vec()
        } else {
            all
        }
    }

    fn layer_grid(&self, layer: &LayerId) -> Result<(usize, usize)> {
        let b = layer.block();
        if b >= self.num_blocks() {
            return Err(Error::Config(format!("unknown layer `{layer}`")));
        }
        Ok(self.block_grid(b))
    }

    fn predict_noise(
        &self,
        latent: &Latent,
        t: usize,
        prompt: &str,
        taps: &TapConfig,
        interventions: &[AttentionIntervention],
    ) -> Result<DenoiserOutput> {
        self.check_latent(latent, t)?;
        for iv in interventions {
            self.check_selector(&iv.selector)?;
        }
        let known_features = self.feature_layers();
        for f in &taps.features {
            if !known_features.contains(f) {
                return Err(Error::Config(format!("unknown feature layer `{f}`")));
            }
        }
        let tokens = self.tokenize(prompt)?;
        let (eps, passes) = self.forward(latent, t, &tokens, interventions)?;

        let cross_attention = if taps.cross_attention {
            (0..tokens.len())
                .map(|p| {
                    passes
                        .iter()
                        .map(|pass| {
                            pass.attention[p]
                                .clone()
                                .into_shape_with_order(pass.grid)
                                .expect("grid-sized attention")
                        })
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };

        let mut features = IndexMap::new();
        for layer in &taps.features {
            let pass = &passes[layer.block()];
            let fmap = self.weights.blocks[layer.block()].feature.dot(&pass.pooled.t());
            let (gh, gw) = pass.grid;
            features.insert(
                layer.clone(),
                fmap.into_shape_with_order((self.config.feature_dim, gh, gw))
                    .expect("feature grid"),
            );
        }

        Ok(DenoiserOutput {
            noise: Latent::from_array(eps),
            cross_attention,
            features,
        })
    }

    fn cross_attention_vjp(
        &self,
        latent: &Latent,
        t: usize,
        prompt: &str,
        upstream: &[(usize, Vec<Array2<f64>>)],
    ) -> Result<Latent> {
        self.check_latent(latent, t)?;
        let tokens = self.tokenize(prompt)?;
        let x = latent.data();
        let (c, h, w) = x.dim();
        let mut grad = Array3::<f64>::zeros((c, h, w));
        let tau = self.config.temperature;
        for (pos, layer_grads) in upstream {
            let token = tokens.get(*pos).ok_or_else(|| {
                Error::Contract(format!("token position {pos} outside prompt of {} tokens", tokens.len()))
            })?;
            if layer_grads.len() != self.num_blocks() {
                return Err(Error::Contract(format!(
                    "expected {} layer gradients, got {}",
                    self.num_blocks(),
                    layer_grads.len()
                )));
            }
            let e = self.token_embedding(token)?;
            for (b, g) in layer_grads.iter().enumerate() {
                let scale = self.config.block_scales[b];
                let grid = self.block_grid(b);
                if g.dim() != grid {
                    return Err(Error::Contract(format!(
                        "gradient for dec.{b}.attn2 has shape {:?}, expected {grid:?}",
                        g.dim()
                    )));
                }
                let pooled = self.pool(x, scale);
                let k = self.weights.blocks[b].cross_k.dot(e);
                let a = softmax((pooled.dot(&k) * tau).view());
                let da = g.iter().copied().collect::<Array1<f64>>();
                let ds = &a * &(&da - a.dot(&da));
                let area = (scale * scale) as f64;
                let wb = grid.1;
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let cell = (y / scale) * wb + xx / scale;
                            grad[[ch, y, xx]] += tau * ds[cell] * k[ch] / area;
                        }
                    }
                }
            }
        }
        Ok(Latent::from_array(grad))
    }

    fn encode(&self, image: &RgbImage) -> Result<Latent> {
        self.codec.encode(image, self.config.height, self.config.width)
    }

    fn decode(&self, latent: &Latent) -> Result<RgbImage> {
        self.codec.decode(latent)
    }
}

impl Trainable for ToyDenoiser {
    fn embedding_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn base_vocabulary(&self) -> &[String] {
        &self.config.vocab
    }

    fn has_token(&self, token: &str) -> bool {
        self.weights.embeddings.contains_key(token)
    }

    fn embedding(&self, token: &str) -> Option<Array1<f64>> {
        self.weights.embeddings.get(token).cloned()
    }

    fn add_token(&mut self, token: &str, init: Array1<f64>) -> Result<()> {
        if self.has_token(token) {
            return Err(Error::Config(format!("token `{token}` already exists")));
        }
        if token.split_whitespace().count() != 1 || token != token.to_lowercase() {
            return Err(Error::Config(format!(
                "token `{token}` must be a single lowercase word"
            )));
        }
        if init.len() != self.config.embed_dim {
            return Err(Error::Contract(format!(
                "embedding has {} dims, backend uses {}",
                init.len(),
                self.config.embed_dim
            )));
        }
        self.weights.embeddings.insert(token.to_string(), init);
        Ok(())
    }

    fn set_embedding(&mut self, token: &str, value: Array1<f64>) -> Result<()> {
        if value.len() != self.config.embed_dim {
            return Err(Error::Contract("embedding dimension mismatch".into()));
        }
        let slot = self
            .weights
            .embeddings
            .get_mut(token)
            .ok_or_else(|| Error::Config(format!("token `{token}` not in vocabulary")))?;
        *slot = value;
        Ok(())
    }

    fn parameter_groups(&self) -> Vec<String> {
        self.group_names()
    }

    fn parameter(&self, group: &str) -> Option<&[f64]> {
        self.group_array(group).and_then(|a| a.as_slice())
    }

    fn parameter_mut(&mut self, group: &str) -> Option<&mut [f64]> {
        self.group_array_mut(group).and_then(|a| a.as_slice_mut())
    }

    fn noise_vjp(
        &self,
        latent: &Latent,
        t: usize,
        prompt: &str,
        upstream: &Latent,
        request: &GradRequest,
    ) -> Result<Gradients> {
        self.check_latent(latent, t)?;
        if upstream.shape() != latent.shape() {
            return Err(Error::Contract("upstream gradient shape mismatch".into()));
        }
        for g in &request.parameters {
            if self.group_array(g).is_none() {
                return Err(Error::Config(format!("unknown parameter group `{g}`")));
            }
        }
        let tokens = self.tokenize(prompt)?;
        let (_, passes) = self.forward(latent, t, &tokens, &[])?;
        let x = latent.data();
        let (c, h, w) = x.dim();
        let g = upstream.data() * self.noise_gain(t);

        let mut params: IndexMap<String, Array2<f64>> = IndexMap::new();
        let mut add = |name: String, delta: Array2<f64>| {
            *params
                .entry(name)
                .or_insert_with(|| Array2::zeros(delta.dim())) += &delta;
        };
        let mut emb_grads: IndexMap<String, Array1<f64>> = IndexMap::new();

        let gflat = g.to_shape((c, h * w)).expect("contiguous");
        let xflat = x.to_shape((c, h * w)).expect("contiguous");
        add("mix".into(), gflat.dot(&xflat.t()));

        let inv_blocks = 1.0 / self.num_blocks() as f64;
        let tau = self.config.temperature;
        let sqrt_da = (self.config.attn_dim as f64).sqrt();
        for (b, pass) in passes.iter().enumerate() {
            let wts = &self.weights.blocks[b];
            let dy = self.pool_sum(&g, pass.scale) * inv_blocks;
            let cells = pass.pooled.nrows();

            let dr = &dy * self.config.cross_gain;
            let coef = cells as f64 / tokens.len() as f64;
            for (p, token) in tokens.iter().enumerate() {
                let e = self.token_embedding(token)?;
                let a = &pass.attention[p];
                let dv = dr.t().dot(a) * coef;
                let da = dr.dot(&pass.values[p]) * coef;
                let ds = a * &(&da - a.dot(&da));
                let dk = pass.pooled.t().dot(&ds) * tau;
                add(format!("dec.{b}.attn2.to_v"), outer(&dv, e));
                add(format!("dec.{b}.attn2.to_k"), outer(&dk, e));
                let de = wts.cross_v.t().dot(&dv) + wts.cross_k.t().dot(&dk);
                *emb_grads
                    .entry(token.clone())
                    .or_insert_with(|| Array1::zeros(self.config.embed_dim)) += &de;
            }

            let dc = &dy * self.config.self_gain;
            add(format!("dec.{b}.attn1.to_out"), dc.t().dot(&pass.o));
            let d_o = dc.dot(&wts.to_out);
            let dv = pass.probs.t().dot(&d_o);
            let dp = d_o.dot(&pass.v.t());
            let row = (&dp * &pass.probs).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dsc = &pass.probs * &(&dp - &row) / sqrt_da;
            let dq = dsc.dot(&pass.k);
            let dk = dsc.t().dot(&pass.q);
            add(format!("dec.{b}.attn1.to_q"), dq.t().dot(&pass.pooled));
            add(format!("dec.{b}.attn1.to_k"), dk.t().dot(&pass.pooled));
            add(format!("dec.{b}.attn1.to_v"), dv.t().dot(&pass.pooled));
        }

        let mut out = Gradients::default();
        for name in &request.parameters {
            let grad = params
                .get(name)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(self.group_array(name).expect("checked").dim()));
            out.parameters
                .insert(name.clone(), grad.as_standard_layout().iter().copied().collect());
        }
        for token in &request.embeddings {
            let grad = emb_grads
                .get(token)
                .cloned()
                .unwrap_or_else(|| Array1::zeros(self.config.embed_dim));
            out.embeddings.insert(token.clone(), grad);
        }
        Ok(out)
    }

    fn export_weights(&self) -> Vec<u8> {
        serde_json::to_vec(&ToyState {
            config: self.config.clone(),
            weights: self.weights.clone(),
        })
        .expect("toy state serializes")
    }

    fn import_weights(&mut self, bytes: &[u8]) -> Result<()> {
        let other = ToyDenoiser::from_weights(bytes)?;
        if other.backend_id() != self.backend_id() {
            return Err(Error::BackendMismatch {
                expected: other.backend_id(),
                actual: self.backend_id(),
            });
        }
        self.weights = other.weights;
        Ok(())
    }
}
