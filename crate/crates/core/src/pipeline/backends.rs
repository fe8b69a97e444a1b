use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backend::{Trainable, ToyConfig, ToyDenoiser};
use crate::concept_learning::DEFAULT_TEMPLATE;
use crate::error::{Error, Result};
use crate::layout::LayoutSpec;

/// Latent channels of the toy backend.
pub const TOY_CHANNELS: usize = 4;
/// Decoder blocks of the toy backend.
pub const TOY_LAYERS: usize = 3;

/// `toy`, `toy:<weights-seed>` or `adapter:<name>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendSelector {
    Toy { weights_seed: u64 },
    Adapter(String),
}

impl Default for BackendSelector {
    fn default() -> Self {
        BackendSelector::Toy { weights_seed: 0 }
    }
}

impl FromStr for BackendSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "toy" => Ok(BackendSelector::Toy { weights_seed: 0 }),
            Some(("toy", seed)) => seed
                .parse()
                .map(|weights_seed| BackendSelector::Toy { weights_seed })
                .map_err(|_| Error::Config(format!("bad toy weights seed `{seed}`"))),
            Some(("adapter", name)) if !name.is_empty() => Ok(BackendSelector::Adapter(name.into())),
            _ => Err(Error::Config(format!(
                "backend must be `toy`, `toy:<seed>` or `adapter:<name>`, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for BackendSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSelector::Toy { weights_seed: 0 } => f.write_str("toy"),
            BackendSelector::Toy { weights_seed } => write!(f, "toy:{weights_seed}"),
            BackendSelector::Adapter(name) => write!(f, "adapter:{name}"),
        }
    }
}

impl Serialize for BackendSelector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BackendSelector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// What a backend constructor gets to see.
pub struct BackendRequest<'a> {
    pub source_layout: &'a LayoutSpec,
    pub image_size: (u32, u32),
}

pub type AdapterFactory =
    Arc<dyn Fn(&BackendRequest<'_>) -> Result<Box<dyn Trainable>> + Send + Sync>;

/// Registry of adapter backends; the toy backend is always available.
#[derive(Clone, Default)]
pub struct Backends {
    adapters: BTreeMap<String, AdapterFactory>,
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("adapters", &self.adapters.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Backends {
    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&BackendRequest<'_>) -> Result<Box<dyn Trainable>> + Send + Sync + 'static,
    ) {
        self.adapters.insert(name.to_string(), Arc::new(factory));
    }

    pub fn create(&self, selector: &BackendSelector, request: &BackendRequest<'_>) -> Result<Box<dyn Trainable>> {
        match selector {
            BackendSelector::Toy { weights_seed } => {
                Ok(Box::new(toy_backend(*weights_seed, request.source_layout, request.image_size)?))
            }
            BackendSelector::Adapter(name) => {
                let factory = self
                    .adapters
                    .get(name)
                    .ok_or_else(|| Error::Backend(format!("no adapter named `{name}` is registered")))?;
                factory(request)
            }
        }
    }
}

/// Words the toy tokenizer must know for prompts about `layout`.
pub fn toy_vocabulary(layout: &LayoutSpec) -> Vec<String> {
    let mut words: BTreeSet<String> = DEFAULT_TEMPLATE
        .replace("{token}", "")
        .replace("{noun}", "")
        .split_whitespace()
        .map(str::to_string)
        .collect();
    words.insert("and".into());
    for obj in &layout.objects {
        words.extend(obj.words());
    }
    words.into_iter().collect()
}

/// Toy backend sized for an image: 4 channels, one latent cell per 8×8 pixels.
pub fn toy_backend(weights_seed: u64, source: &LayoutSpec, (w, h): (u32, u32)) -> Result<ToyDenoiser> {
    let config = ToyConfig::new(weights_seed, toy_vocabulary(source), (TOY_CHANNELS, 1, 1), TOY_LAYERS);
    let f = config.downsample as u32;
    if w % f != 0 || h % f != 0 || w == 0 || h == 0 {
        return Err(Error::Backend(format!(
            "toy backend needs image sides divisible by {f}, got {w}x{h}"
        )));
    }
    let shape = (TOY_CHANNELS, (h / f) as usize, (w / f) as usize);
    ToyDenoiser::new(ToyConfig::new(weights_seed, toy_vocabulary(source), shape, TOY_LAYERS))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_strings() {
        for s in ["toy", "toy:7", "adapter:sd15"] {
            assert_eq!(s.parse::<BackendSelector>().unwrap().to_string(), s);
        }
        assert_eq!("toy:0".parse::<BackendSelector>().unwrap().to_string(), "toy");
        for bad in ["", "toy:x", "adapter:", "gpu"] {
            assert!(bad.parse::<BackendSelector>().is_err(), "{bad}");
        }
    }

    #[test]
    fn unknown_adapter_is_backend_error() {
        let layout = LayoutSpec::empty(64, 64);
        let req = BackendRequest { source_layout: &layout, image_size: (64, 64) };
        let err = Backends::default()
            .create(&BackendSelector::Adapter("nope".into()), &req)
            .err()
            .unwrap();
        assert!(err.is_backend());
    }
}
