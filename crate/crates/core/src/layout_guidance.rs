//! Cross-attention region losses and guided latent updates.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::{AlphaMode, Denoiser, Latent, NoiseSchedule, TapConfig};
use crate::error::{Error, Result};
use crate::grid::{area_resample, area_resample_adjoint};

/// Per-object attention averaged over layers at a common resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedAttention(Array2<f64>);

impl AggregatedAttention {
    pub fn new(map: Array2<f64>) -> Result<Self> {
        if map.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract("attention must be finite and non-negative".into()));
        }
        Ok(AggregatedAttention(map))
    }

    pub fn map(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_map(self) -> Array2<f64> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Guidance strength η.
    pub eta: f64,
    /// Fraction of the denoising steps, counted from the noisy end, that get guidance.
    pub guidance_fraction: f64,
    /// Gradient steps per denoising step; attention is recomputed for each.
    pub inner_iterations: usize,
    pub alpha_mode: AlphaMode,
    /// Common attention grid; defaults to the coarsest cross-attention layer.
    pub attention_resolution: Option<(usize, usize)>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            eta: 30.0,
            guidance_fraction: 0.3,
            inner_iterations: 3,
            alpha_mode: AlphaMode::Cumulative,
            attention_resolution: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.guidance_fraction >= 0.0 && self.guidance_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "guidance_fraction must be in [0, 1], got {}",
                self.guidance_fraction
            )));
        }
        if self.inner_iterations == 0 {
            return Err(Error::Config("inner_iterations must be >= 1".into()));
        }
        Ok(())
    }

    /// Guidance disabled entirely.
    pub fn disabled() -> Self {
        GuidanceConfig {
            eta: 0.0,
            guidance_fraction: 0.0,
            ..GuidanceConfig::default()
        }
    }
}

/// Resample each layer map to `resolution` by area averaging, then average over layers.
pub fn aggregate_attention(
    layers: &[Array2<f64>],
    resolution: (usize, usize),
) -> Result<AggregatedAttention> {
    if layers.is_empty() {
        return Err(Error::Contract("need at least one attention layer".into()));
    }
    let mut acc = Array2::zeros(resolution);
    for map in layers {
        acc += &area_resample(map.view(), resolution.0, resolution.1);
    }
    AggregatedAttention::new(acc / layers.len() as f64)
}

/// Adjoint of [`aggregate_attention`] for layers of the given grids.
pub fn aggregate_attention_adjoint(grad: &Array2<f64>, grids: &[(usize, usize)]) -> Vec<Array2<f64>> {
    let inv = 1.0 / grids.len() as f64;
    grids
        .iter()
        .map(|&(h, w)| area_resample_adjoint(grad.view(), h, w) * inv)
        .collect()
}

fn check_mask(attn: &AggregatedAttention, mask: &Array2<bool>) -> Result<(f64, f64)> {
    if attn.0.dim() != mask.dim() {
        return Err(Error::Contract(format!(
            "mask grid {:?} != attention grid {:?}",
            mask.dim(),
            attn.0.dim()
        )));
    }
    let (mut inside, mut outside) = (0.0, 0.0);
    for (&a, &m) in attn.0.iter().zip(mask.iter()) {
        if m {
            inside += a;
        } else {
            outside += a;
        }
    }
    let total = inside + outside;
    if !(total > 0.0) {
        return Err(Error::Contract(
            "attention map has zero total mass (broken tap?)".into(),
        ));
    }
    Ok((inside, total))
}

/// `1 − Σ_{u∈M} A(u) / Σ_u A(u)`, evaluated as outside mass over total so
/// that full containment is exactly zero.
pub fn region_loss(attn: &AggregatedAttention, mask: &Array2<bool>) -> Result<f64> {
    let (inside, total) = check_mask(attn, mask)?;
    Ok((total - inside) / total)
}

/// Region loss together with its gradient with respect to the attention map.
pub fn region_loss_with_grad(
    attn: &AggregatedAttention,
    mask: &Array2<bool>,
) -> Result<(f64, Array2<f64>)> {
    let (inside, total) = check_mask(attn, mask)?;
    let grad = mask.mapv(|m| (inside - if m { total } else { 0.0 }) / (total * total));
    Ok(((total - inside) / total, grad))
}

/// Mean of the per-object losses.
pub fn total_region_loss(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Contract("no region losses to average".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// `x − σ_t² η ∇L`.
pub fn guided_update(
    latent: &Latent,
    grad: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
) -> Result<Latent> {
    if latent.shape() != grad.shape() {
        return Err(Error::Contract("gradient shape differs from latent".into()));
    }
    if config.eta == 0.0 {
        return Ok(latent.clone());
    }
    let step = schedule.sigma_sq(t, config.alpha_mode) * config.eta;
    Ok(latent.axpy(-step, grad))
}

/// Windows shorter than this many steps count as empty.
const WINDOW_TOL: f64 = 1e-6;

/// Guidance runs on the first `guidance_fraction` of the steps counted down
/// from `start`: true iff `t > start · (1 − guidance_fraction)`.
pub fn guidance_active_from(t: usize, start: usize, config: &GuidanceConfig) -> bool {
    if t == 0 || config.guidance_fraction <= 0.0 || config.eta == 0.0 {
        return false;
    }
    let threshold = start as f64 * (1.0 - config.guidance_fraction);
    t as f64 > threshold + WINDOW_TOL
}

/// [`guidance_active_from`] with the run starting at `T`.
pub fn guidance_active(t: usize, schedule: &NoiseSchedule, config: &GuidanceConfig) -> bool {
    guidance_active_from(t, schedule.num_steps(), config)
}

/// How one object's attention is read out of a prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTarget {
    pub object_id: String,
    /// Prompt token positions; the object map is the per-cell max over them.
    pub token_positions: Vec<usize>,
    /// Target mask at the attention resolution.
    pub mask: Array2<bool>,
}

/// Grid used for aggregated attention.
pub fn attention_resolution(denoiser: &dyn Denoiser, config: &GuidanceConfig) -> Result<(usize, usize)> {
    if let Some(res) = config.attention_resolution {
        return Ok(res);
    }
    let mut best: Option<(usize, usize)> = None;
    for layer in denoiser.cross_attention_layers() {
        let g = denoiser.layer_grid(&layer)?;
        if best.is_none_or(|b| g.0 * g.1 < b.0 * b.1) {
            best = Some(g);
        }
    }
    best.ok_or_else(|| Error::Backend("backend has no cross-attention layers".into()))
}

/// Per-cell maximum over token positions; also returns which position won each cell.
fn object_map(
    per_token: &[Vec<Array2<f64>>],
    positions: &[usize],
    resolution: (usize, usize),
) -> Result<(AggregatedAttention, Array2<usize>)> {
    let mut best: Option<Array2<f64>> = None;
    let mut winner = Array2::from_elem(resolution, positions.first().copied().unwrap_or(0));
    for &p in positions {
        let layers = per_token.get(p).ok_or_else(|| {
            Error::Contract(format!("token position {p} has no attention maps"))
        })?;
        let agg = aggregate_attention(layers, resolution)?.into_map();
        match &mut best {
            None => best = Some(agg),
            Some(cur) => {
                for ((idx, c), &v) in cur.indexed_iter_mut().zip(agg.iter()) {
                    if v > *c {
                        *c = v;
                        winner[idx] = p;
                    }
                }
            }
        }
    }
    let map = best.ok_or_else(|| Error::Contract("object has no token positions".into()))?;
    Ok((AggregatedAttention::new(map)?, winner))
}

/// Region loss of every target on `latent` (no gradients).
pub fn region_losses(
    denoiser: &dyn Denoiser,
    latent: &Latent,
    t: usize,
    prompt: &str,
    targets: &[ObjectTarget],
    resolution: (usize, usize),
) -> Result<Vec<f64>> {
    let out = denoiser.predict_noise(latent, t, prompt, &TapConfig::attention(), &[])?;
    targets
        .iter()
        .map(|tg| {
            let (map, _) = object_map(&out.cross_attention, &tg.token_positions, resolution)?;
            region_loss(&map, &tg.mask)
        })
        .collect()
}

/// Aggregated attention map of every target on `latent`.
pub fn object_attention_maps(
    denoiser: &dyn Denoiser,
    latent: &Latent,
    t: usize,
    prompt: &str,
    targets: &[ObjectTarget],
    resolution: (usize, usize),
) -> Result<Vec<AggregatedAttention>> {
    let out = denoiser.predict_noise(latent, t, prompt, &TapConfig::attention(), &[])?;
    targets
        .iter()
        .map(|tg| Ok(object_map(&out.cross_attention, &tg.token_positions, resolution)?.0))
        .collect()
}

/// Mean region loss over `targets` and its gradient with respect to the latent.
/// With a single target this is that object's own loss.
pub fn region_loss_and_grad(
    denoiser: &dyn Denoiser,
    latent: &Latent,
    t: usize,
    prompt: &str,
    targets: &[ObjectTarget],
    resolution: (usize, usize),
) -> Result<(Vec<f64>, Latent)> {
    if targets.is_empty() {
        return Err(Error::Contract("no guidance targets".into()));
    }
    let out = denoiser.predict_noise(latent, t, prompt, &TapConfig::attention(), &[])?;
    let layers = denoiser.cross_attention_layers();
    let grids = layers
        .iter()
        .map(|l| denoiser.layer_grid(l))
        .collect::<Result<Vec<_>>>()?;
    let n = targets.len() as f64;
    let mut losses = Vec::with_capacity(targets.len());
    let mut upstream: Vec<(usize, Vec<Array2<f64>>)> = Vec::new();
    for tg in targets {
        let (map, winner) = object_map(&out.cross_attention, &tg.token_positions, resolution)?;
        let (loss, grad) = region_loss_with_grad(&map, &tg.mask)?;
        losses.push(loss);
        for &p in &tg.token_positions {
            let routed = Array2::from_shape_fn(resolution, |idx| {
                if winner[idx] == p {
                    grad[idx] / n
                } else {
                    0.0
                }
            });
            upstream.push((p, aggregate_attention_adjoint(&routed, &grids)));
        }
    }
    let grad = denoiser.cross_attention_vjp(latent, t, prompt, &upstream)?;
    Ok((losses, grad))
}

/// Run `config.inner_iterations` guided updates on a copy of `latent`,
/// recomputing attention each time. Returns the optimized latent and the
/// per-target losses measured before each update.
pub fn optimize_latent(
    denoiser: &dyn Denoiser,
    latent: &Latent,
    t: usize,
    prompt: &str,
    targets: &[ObjectTarget],
    config: &GuidanceConfig,
    resolution: (usize, usize),
) -> Result<(Latent, Vec<Vec<f64>>)> {
    let mut current = latent.clone();
    let mut history = Vec::with_capacity(config.inner_iterations);
    for _ in 0..config.inner_iterations {
        let (losses, grad) = region_loss_and_grad(denoiser, &current, t, prompt, targets, resolution)?;
        history.push(losses);
        current = guided_update(&current, &grad, t, denoiser.schedule(), config)?;
    }
    Ok((current, history))
}

/// One row of guidance telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub object_losses: Vec<(String, f64)>,
    pub total: f64,
}

/// CSV with columns `step,object,loss,total`, one row per object per step.
pub fn telemetry_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,object,loss,total\n");
    for r in records {
        for (id, loss) in &r.object_losses {
            out.push_str(&format!("{},{},{},{}\n", r.step, id, loss, r.total));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn agg(m: Array2<f64>) -> AggregatedAttention {
        AggregatedAttention::new(m).unwrap()
    }

    #[test]
    fn region_loss_examples() {
        let full = Array2::from_elem((8, 8), true);
        assert_eq!(region_loss(&agg(Array2::from_elem((8, 8), 0.3)), &full).unwrap(), 0.0);
        let mask = Array2::from_shape_fn((8, 8), |(y, x)| y < 4 && x < 4);
        assert_eq!(region_loss(&agg(Array2::from_elem((8, 8), 1.0 / 64.0)), &mask).unwrap(), 0.75);
        let a = array![[3.0, 1.0]];
        assert_eq!(region_loss(&agg(a), &array![[true, false]]).unwrap(), 0.25);
    }

    #[test]
    fn region_loss_errors() {
        let z = agg(Array2::zeros((2, 2)));
        assert!(region_loss(&z, &Array2::from_elem((2, 2), true)).is_err());
        let a = agg(Array2::ones((2, 2)));
        assert!(region_loss(&a, &Array2::from_elem((3, 2), true)).is_err());
        assert!(AggregatedAttention::new(array![[-1.0]]).is_err());
    }

    #[test]
    fn region_loss_gradient_matches_differences() {
        let a = array![[0.5, 1.5, 0.2], [0.9, 0.1, 2.0]];
        let mask = array![[true, false, true], [false, false, true]];
        let (_, g) = region_loss_with_grad(&agg(a.clone()), &mask).unwrap();
        let h = 1e-7;
        for idx in [(0, 0), (0, 1), (1, 2)] {
            let mut p = a.clone();
            p[idx] += h;
            let mut m = a.clone();
            m[idx] -= h;
            let fd = (region_loss(&agg(p), &mask).unwrap() - region_loss(&agg(m), &mask).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(fd, g[idx], epsilon = 1e-7);
        }
    }

    #[test]
    fn total_loss_is_mean() {
        assert_eq!(total_region_loss(&[0.2]).unwrap(), 0.2);
        assert_eq!(total_region_loss(&[0.0, 1.0]).unwrap(), 0.5);
        assert_abs_diff_eq!(total_region_loss(&[0.1, 0.2, 0.3]).unwrap(), 0.2, epsilon = 1e-15);
        assert!(total_region_loss(&[]).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let m = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64);
        assert_eq!(aggregate_attention(std::slice::from_ref(&m), (4, 4)).unwrap().into_map(), m);
        assert_eq!(aggregate_attention(&[m.clone(), m.clone()], (4, 4)).unwrap().into_map(), m);
        let down = aggregate_attention(&[m], (2, 2)).unwrap().into_map();
        assert_eq!(down, array![[2.5, 4.5], [10.5, 12.5]]);
        assert!(aggregate_attention(&[], (2, 2)).is_err());
    }

    #[test]
    fn guided_update_closed_form() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        let x = Latent::new(ndarray::Array3::from_elem((1, 2, 2), 2.0)).unwrap();
        let g = Latent::new(ndarray::Array3::from_elem((1, 2, 2), 0.75)).unwrap();
        let cfg = GuidanceConfig {
            eta: 1.0,
            ..GuidanceConfig::default()
        };
        let out = guided_update(&x, &g, 1, &s, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.25));
        let zero = Latent::zeros((1, 2, 2));
        assert_eq!(guided_update(&x, &zero, 1, &s, &cfg).unwrap(), x);
        let off = GuidanceConfig { eta: 0.0, ..cfg };
        assert_eq!(guided_update(&x, &g, 1, &s, &off).unwrap(), x);
    }

    #[test]
    fn active_window() {
        let s = NoiseSchedule::scaled_linear(20).unwrap();
        let cfg = |f| GuidanceConfig {
            guidance_fraction: f,
            ..GuidanceConfig::default()
        };
        let active: Vec<usize> = (0..=20).filter(|&t| guidance_active(t, &s, &cfg(0.3))).collect();
        assert_eq!(active, (15..=20).collect::<Vec<_>>());
        assert!((1..=20).all(|t| guidance_active(t, &s, &cfg(1.0))));
        assert!((0..=20).all(|t| !guidance_active(t, &s, &cfg(1e-9))));
        // window measured from a later start
        let from14: Vec<usize> = (0..=14).filter(|&t| guidance_active_from(t, 14, &cfg(0.3))).collect();
        assert_eq!(from14, vec![10, 11, 12, 13, 14]);
    }
}
