//! Denoiser abstraction, DDIM sampling/inversion and the analytic toy backend.
//!
//! Layer ids follow `dec.<block>.<kind>` where kind is `attn1` (self
//! attention), `attn2` (cross attention) or `out` (block output features).

mod codec;
mod schedule;
mod toy;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use codec::PoolCodec;
pub use schedule::{
    ddim_invert_step, ddim_invert_trace, ddim_sample, ddim_step, AlphaMode, DenoisingTrace, InversionConfig,
    NoiseSchedule,
};
pub use toy::{make_toy_denoiser, ToyConfig, ToyDenoiser};

/// Latent tensor laid out `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent(Array3<f64>);

impl Latent {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("latent contains non-finite values".into()));
        }
        Ok(Latent(data))
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Latent(Array3::zeros(shape))
    }

    /// Wraps without the finiteness scan; used on hot paths whose inputs are
    /// already known finite.
    pub(crate) fn from_array(data: Array3<f64>) -> Self {
        Latent(data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn channels(&self) -> usize {
        self.0.dim().0
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        Zip::from(&self.0)
            .and(&other.0)
            .fold(0.0f64, |m, a, b| m.max((a - b).abs()))
    }

    /// `self + scale * other`
    pub fn axpy(&self, scale: f64, other: &Latent) -> Latent {
        Latent(&self.0 + &(&other.0 * scale))
    }

    /// Little-endian f64 bytes in row-major order, used for content hashes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    SelfAttention,
    CrossAttention,
    Output,
}

impl LayerKind {
    fn tag(self) -> &'static str {
        match self {
            LayerKind::SelfAttention => "attn1",
            LayerKind::CrossAttention => "attn2",
            LayerKind::Output => "out",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId(String);

impl LayerId {
    pub fn new(block: usize, kind: LayerKind) -> Self {
        LayerId(format!("dec.{block}.{}", kind.tag()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn block(&self) -> usize {
        self.0
            .split('.')
            .nth(1)
            .and_then(|b| b.parse().ok())
            .expect("layer ids are validated on construction")
    }

    pub fn kind(&self) -> LayerKind {
        match self.0.rsplit('.').next() {
            Some("attn1") => LayerKind::SelfAttention,
            Some("attn2") => LayerKind::CrossAttention,
            _ => LayerKind::Output,
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        match parts.as_slice() {
            ["dec", block, "attn1" | "attn2" | "out"] if block.parse::<usize>().is_ok() => {
                Ok(LayerId(s.to_string()))
            }
            _ => Err(Error::Config(format!(
                "malformed layer id `{s}` (expected dec.<block>.<attn1|attn2|out>)"
            ))),
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What `predict_noise` should report besides the noise itself.
#[derive(Clone, Debug, Default)]
pub struct TapConfig {
    pub cross_attention: bool,
    pub features: Vec<LayerId>,
}

impl TapConfig {
    pub fn none() -> Self {
        TapConfig::default()
    }

    pub fn attention() -> Self {
        TapConfig {
            cross_attention: true,
            features: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    pub noise: Latent,
    /// Indexed by prompt token position, then by cross-attention layer in
    /// the order of [`Denoiser::cross_attention_layers`]. Empty unless tapped.
    pub cross_attention: Vec<Vec<Array2<f64>>>,
    /// Features `[d, h, w]` for exactly the tapped layers.
    pub features: IndexMap<LayerId, Array3<f64>>,
}

/// Arguments handed to an attention hook. Rows of `query`/`key`/`value`
/// are spatial locations of a `grid.0 x grid.1` map in row-major order.
pub struct SelfAttentionCall<'a> {
    pub layer: &'a LayerId,
    pub query: ArrayView2<'a, f64>,
    pub key: ArrayView2<'a, f64>,
    pub value: ArrayView2<'a, f64>,
    pub t: usize,
    pub grid: (usize, usize),
}

pub type AttentionHook =
    Arc<dyn Fn(&SelfAttentionCall<'_>) -> Option<Array2<f64>> + Send + Sync + 'static>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSelector {
    All,
    Only(Vec<LayerId>),
}

impl LayerSelector {
    pub fn matches(&self, layer: &LayerId) -> bool {
        match self {
            LayerSelector::All => true,
            LayerSelector::Only(ids) => ids.contains(layer),
        }
    }
}

/// Replaces (or only observes) the value array of selected self-attention layers.
#[derive(Clone)]
pub struct AttentionIntervention {
    pub selector: LayerSelector,
    pub hook: AttentionHook,
}

impl AttentionIntervention {
    pub fn new(
        selector: LayerSelector,
        hook: impl Fn(&SelfAttentionCall<'_>) -> Option<Array2<f64>> + Send + Sync + 'static,
    ) -> Self {
        AttentionIntervention {
            selector,
            hook: Arc::new(hook),
        }
    }
}

impl fmt::Debug for AttentionIntervention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttentionIntervention")
            .field("selector", &self.selector)
            .finish_non_exhaustive()
    }
}

/// Inference surface of a latent-diffusion denoiser.
///
/// Implementations must be deterministic: identical arguments give bitwise
/// identical outputs. Inference takes `&self` and is safe to call from
/// several threads at once.
pub trait Denoiser: Send + Sync {
    /// Stable identity of the architecture and base weights. Concept bundles
    /// refuse to load into a backend with a different id.
    fn backend_id(&self) -> String;

    fn schedule(&self) -> &NoiseSchedule;

    fn latent_shape(&self) -> (usize, usize, usize);

    /// Image pixels per latent cell along each axis.
    fn downsample_factor(&self) -> usize;

    fn tokenize(&self, prompt: &str) -> Result<Vec<String>>;

    fn cross_attention_layers(&self) -> Vec<LayerId>;

    fn self_attention_layers(&self) -> Vec<LayerId>;

    fn feature_layers(&self) -> Vec<LayerId>;

    /// Feature layers tapped when the caller does not choose.
    fn default_feature_taps(&self) -> Vec<LayerId>;

    /// Spatial grid of a layer's maps.
    fn layer_grid(&self, layer: &LayerId) -> Result<(usize, usize)>;

    fn predict_noise(
        &self,
        latent: &Latent,
        t: usize,
        prompt: &str,
        taps: &TapConfig,
        interventions: &[AttentionIntervention],
    ) -> Result<DenoiserOutput>;

    /// Vector-Jacobian product of the cross-attention maps with respect to
    /// the latent. `upstream` pairs a prompt token position with one gradient
    /// map per cross-attention layer.
    fn cross_attention_vjp(
        &self,
        latent: &Latent,
        t: usize,
        prompt: &str,
        upstream: &[(usize, Vec<Array2<f64>>)],
    ) -> Result<Latent>;

    fn encode(&self, image: &RgbImage) -> Result<Latent>;

    fn decode(&self, latent: &Latent) -> Result<RgbImage>;
}

/// Which trainable quantities a [`Trainable::noise_vjp`] call differentiates.
#[derive(Clone, Debug, Default)]
pub struct GradRequest {
    pub embeddings: Vec<String>,
    pub parameters: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub embeddings: IndexMap<String, Array1<f64>>,
    pub parameters: IndexMap<String, Vec<f64>>,
}

/// Training surface used by concept learning.
pub trait Trainable: Denoiser {
    fn embedding_dim(&self) -> usize;

    fn base_vocabulary(&self) -> &[String];

    fn has_token(&self, token: &str) -> bool;

    fn embedding(&self, token: &str) -> Option<Array1<f64>>;

    /// Registers a new token. Fails if it already exists.
    fn add_token(&mut self, token: &str, init: Array1<f64>) -> Result<()>;

    fn set_embedding(&mut self, token: &str, value: Array1<f64>) -> Result<()>;

    /// Names of the trainable weight groups, e.g. `dec.0.attn2.to_v`.
    fn parameter_groups(&self) -> Vec<String>;

    fn parameter(&self, group: &str) -> Option<&[f64]>;

    fn parameter_mut(&mut self, group: &str) -> Option<&mut [f64]>;

    /// Gradient of `<upstream, ε_θ(latent, t, prompt)>` with respect to the
    /// requested embeddings and weight groups.
    fn noise_vjp(
        &self,
        latent: &Latent,
        t: usize,
        prompt: &str,
        upstream: &Latent,
        request: &GradRequest,
    ) -> Result<Gradients>;

    fn export_weights(&self) -> Vec<u8>;

    fn import_weights(&mut self, bytes: &[u8]) -> Result<()>;
}
