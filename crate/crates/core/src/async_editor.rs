//! Per-object guidance on latent clones and layout-driven fusion of the
//! branch noise predictions.

use indexmap::IndexMap;
use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance_projection::ApaScope;
use crate::backend::{ddim_step, AttentionIntervention, Denoiser, Latent, TapConfig};
use crate::error::{Error, Result};
use crate::layout_guidance::{
    guidance_active_from, optimize_latent, region_losses, GuidanceConfig, ObjectTarget,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// One guided clone per object, fused by the target layout.
    #[default]
    Async,
    /// Single guidance pass on the mean loss of all objects.
    Sync,
}

/// Source of the noise for cells outside every target mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseBranch {
    #[default]
    Unguided,
    /// Guided on the mean loss of all objects.
    Joint,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditorConfig {
    pub mode: EditMode,
    pub base: BaseBranch,
    /// Step the shared latent with the fused noise. By default the branch
    /// latents are fused with the same partition as the noises and that
    /// fused latent is stepped instead.
    pub keep_literal_latent: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchId {
    Base,
    Object(String),
}

#[derive(Clone, Debug)]
pub struct BranchResult {
    pub id: BranchId,
    pub latent: Latent,
    pub noise: Latent,
    /// Losses before each inner update, empty when no guidance ran.
    pub history: Vec<Vec<f64>>,
}

/// Guide a clone of `shared` on one object's loss and predict its noise.
#[allow(clippy::too_many_arguments)]
pub fn per_object_guidance(
    denoiser: &dyn Denoiser,
    shared: &Latent,
    target: &ObjectTarget,
    t: usize,
    start: usize,
    prompt: &str,
    config: &GuidanceConfig,
    resolution: (usize, usize),
    interventions: &[AttentionIntervention],
) -> Result<BranchResult> {
    let (latent, history) = if guidance_active_from(t, start, config) {
        optimize_latent(denoiser, shared, t, prompt, std::slice::from_ref(target), config, resolution)?
    } else {
        (shared.clone(), Vec::new())
    };
    let noise = denoiser
        .predict_noise(&latent, t, prompt, &TapConfig::none(), interventions)?
        .noise;
    Ok(BranchResult {
        id: BranchId::Object(target.object_id.clone()),
        latent,
        noise,
        history,
    })
}

/// Which branch owns each cell: `Some(i)` for object `i`, `None` for base.
/// Overlaps go to the last listed object.
pub fn fusion_assignment(masks: &[Array2<bool>], grid: (usize, usize)) -> Result<Array2<Option<usize>>> {
    let mut owner = Array2::from_elem(grid, None);
    for (i, m) in masks.iter().enumerate() {
        if m.dim() != grid {
            return Err(Error::Contract(format!(
                "fusion mask {i} is {:?}, latent grid is {grid:?}",
                m.dim()
            )));
        }
        Zip::from(&mut owner).and(m).for_each(|o, &inside| {
            if inside {
                *o = Some(i);
            }
        });
    }
    Ok(owner)
}

fn stitch(base: &Latent, parts: &[&Latent], owner: &Array2<Option<usize>>) -> Latent {
    let mut out = base.data().clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        Zip::indexed(&mut plane).for_each(|(y, x), v| {
            if let Some(i) = owner[[y, x]] {
                *v = parts[i].data()[[c, y, x]];
            }
        });
    }
    Latent::from_array(out)
}

/// Stitch branch noises by the target layout. `branches` must hold one
/// object branch per mask, in layout order.
pub fn fuse_noise(
    branches: &[BranchResult],
    base: &BranchResult,
    masks: &[Array2<bool>],
) -> Result<(Latent, Array2<Option<usize>>)> {
    if base.id != BranchId::Base {
        return Err(Error::Contract("base branch is not marked BASE".into()));
    }
    if branches.len() != masks.len() {
        return Err(Error::Contract(format!(
            "{} object branches for {} layout objects",
            branches.len(),
            masks.len()
        )));
    }
    let (_, h, w) = base.noise.shape();
    let owner = fusion_assignment(masks, (h, w))?;
    let noises: Vec<&Latent> = branches.iter().map(|b| &b.noise).collect();
    Ok((stitch(&base.noise, &noises, &owner), owner))
}

/// Everything the caller needs to run one editing step.
pub struct StepContext<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub prompt: &'a str,
    /// Guidance targets at the attention resolution, in layout order.
    pub targets: &'a [ObjectTarget],
    /// Target masks at latent resolution, aligned with `targets`.
    pub fusion_masks: &'a [Array2<bool>],
    pub guidance: &'a GuidanceConfig,
    pub editor: &'a EditorConfig,
    pub attention_resolution: (usize, usize),
    /// Step the run started from; the guidance window counts down from here.
    pub start_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub t: usize,
    pub guided: bool,
    /// Per-object region loss of the shared latent entering the step.
    pub losses: Vec<f64>,
    /// Inner-iteration loss history per branch.
    pub branch_losses: IndexMap<String, Vec<Vec<f64>>>,
    /// Cells owned by each branch, `base` first.
    pub occupancy: IndexMap<String, usize>,
}

fn branch_name(id: &BranchId) -> String {
    match id {
        BranchId::Base => "base".into(),
        BranchId::Object(o) => o.clone(),
    }
}

/// Advance the shared latent from `t` to `t − 1`.
///
/// `interventions` carry the appearance projection; `scope` decides whether
/// object branches receive them too.
pub fn editing_step(
    ctx: &StepContext<'_>,
    shared: &Latent,
    t: usize,
    interventions: &[AttentionIntervention],
    scope: ApaScope,
) -> Result<(Latent, StepReport)> {
    let d = ctx.denoiser;
    if ctx.targets.len() != ctx.fusion_masks.len() {
        return Err(Error::Contract("one fusion mask per target required".into()));
    }
    let guided = !ctx.targets.is_empty() && guidance_active_from(t, ctx.start_step, ctx.guidance);
    let losses = if ctx.targets.is_empty() {
        Vec::new()
    } else {
        region_losses(d, shared, t, ctx.prompt, ctx.targets, ctx.attention_resolution)?
    };
    let object_ivs: &[AttentionIntervention] = match scope {
        ApaScope::AllBranches => interventions,
        ApaScope::BaseOnly => &[],
    };
    let mut branch_losses = IndexMap::new();

    let joint = |latent: &Latent| -> Result<(Latent, Vec<Vec<f64>>)> {
        if guided {
            optimize_latent(d, latent, t, ctx.prompt, ctx.targets, ctx.guidance, ctx.attention_resolution)
        } else {
            Ok((latent.clone(), Vec::new()))
        }
    };

    let (next, occupancy) = match ctx.editor.mode {
        EditMode::Sync => {
            let (latent, history) = joint(shared)?;
            let noise = d.predict_noise(&latent, t, ctx.prompt, &TapConfig::none(), interventions)?.noise;
            branch_losses.insert("joint".to_string(), history);
            let (_, h, w) = shared.shape();
            let mut occ = IndexMap::new();
            occ.insert("joint".to_string(), h * w);
            (ddim_step(&latent, &noise, t, d.schedule())?, occ)
        }
        EditMode::Async => {
            let branches: Vec<BranchResult> = ctx
                .targets
                .par_iter()
                .map(|tg| {
                    per_object_guidance(
                        d,
                        shared,
                        tg,
                        t,
                        ctx.start_step,
                        ctx.prompt,
                        ctx.guidance,
                        ctx.attention_resolution,
                        object_ivs,
                    )
                })
                .collect::<Result<_>>()?;
            let (base_latent, base_history) = match ctx.editor.base {
                BaseBranch::Unguided => (shared.clone(), Vec::new()),
                BaseBranch::Joint if !ctx.targets.is_empty() => joint(shared)?,
                BaseBranch::Joint => (shared.clone(), Vec::new()),
            };
            let base_noise = d
                .predict_noise(&base_latent, t, ctx.prompt, &TapConfig::none(), interventions)?
                .noise;
            let base = BranchResult {
                id: BranchId::Base,
                latent: base_latent,
                noise: base_noise,
                history: base_history,
            };
            let (noise, owner) = fuse_noise(&branches, &base, ctx.fusion_masks)?;

            let mut occ = IndexMap::new();
            occ.insert("base".to_string(), owner.iter().filter(|o| o.is_none()).count());
            for (i, b) in branches.iter().enumerate() {
                occ.insert(branch_name(&b.id), owner.iter().filter(|&&o| o == Some(i)).count());
            }
            branch_losses.insert("base".to_string(), base.history.clone());
            for b in &branches {
                branch_losses.insert(branch_name(&b.id), b.history.clone());
            }

            let latent = if ctx.editor.keep_literal_latent {
                shared.clone()
            } else {
                let parts: Vec<&Latent> = branches.iter().map(|b| &b.latent).collect();
                stitch(&base.latent, &parts, &owner)
            };
            (ddim_step(&latent, &noise, t, d.schedule())?, occ)
        }
    };
    let (_, h, w) = shared.shape();
    let covered: usize = occupancy.values().sum();
    if covered != h * w {
        return Err(Error::Contract(format!(
            "fusion covered {covered} of {} cells",
            h * w
        )));
    }
    Ok((
        next,
        StepReport {
            t,
            guided,
            losses,
            branch_losses,
            occupancy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn lat(v: f64) -> Latent {
        Latent::new(Array3::from_elem((2, 3, 3), v)).unwrap()
    }

    fn branch(id: BranchId, v: f64) -> BranchResult {
        BranchResult {
            id,
            latent: lat(v),
            noise: lat(v),
            history: Vec::new(),
        }
    }

    #[test]
    fn fuse_overlap_and_background() {
        let a = Array2::from_shape_fn((3, 3), |(y, x)| y < 2 && x < 2);
        let b = Array2::from_shape_fn((3, 3), |(y, x)| y >= 1 && x >= 1);
        let branches = [branch(BranchId::Object("a".into()), 1.0), branch(BranchId::Object("b".into()), 2.0)];
        let (fused, owner) = fuse_noise(&branches, &branch(BranchId::Base, 0.0), &[a, b]).unwrap();
        let expected = [[1.0, 1.0, 0.0], [1.0, 2.0, 2.0], [0.0, 2.0, 2.0]];
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    assert_eq!(fused.data()[[c, y, x]], expected[y][x]);
                }
            }
        }
        assert_eq!(owner[[1, 1]], Some(1));
    }

    #[test]
    fn fuse_requires_one_branch_per_object() {
        let m = Array2::from_elem((3, 3), true);
        assert!(fuse_noise(&[], &branch(BranchId::Base, 0.0), &[m]).is_err());
    }
}
