//! Target selection: pooling proposal features from the position-aware patch
//! grid, the contrastive grounding loss against the `<ground>` state, the
//! category loss, and the weighted joint objective.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::{DiffError, Tensor, Var};
use crate::geometry::{patch_box_coverage, Aabb, CameraFrame, Coverage};
use crate::posenc::{sinusoidal_encode_3d, PosEncConfig};
use crate::synthscene::CATEGORIES;

pub use crate::synthscene::ObjectProposal;

pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundingError {
    #[error("loss component {component} is not finite ({value})")]
    NonFinite { component: &'static str, value: f64 },
    #[error("no proposals")]
    NoProposals,
    #[error("target index {target} out of range for {count} proposals")]
    Target { target: usize, count: usize },
    #[error("category {0} outside the vocabulary")]
    Category(usize),
    #[error("box has no valid patch to pool from")]
    NoPatch,
    #[error("negative loss weight {name} = {value}")]
    Weight { name: &'static str, value: f64 },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_r: f64,
    pub lambda_l: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_g: 1.0,
            lambda_r: 0.3,
            lambda_l: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), GroundingError> {
        for (name, value) in [("lambda_g", self.lambda_g), ("lambda_r", self.lambda_r), ("lambda_l", self.lambda_l)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(GroundingError::Weight { name, value });
            }
        }
        Ok(())
    }
}

/// Detached result of one grounding forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingOutput {
    pub ground_state: Vec<f64>,
    /// `[P, dim]`, one row per proposal in input order.
    pub object_features: Tensor,
    pub similarities: Vec<f64>,
    pub category_logits: Vec<f64>,
    pub predicted_id: usize,
    /// Proposals pooled through the highest-coverage fallback.
    pub fallback: Vec<bool>,
}

impl GroundingOutput {
    pub fn predicted_category(&self) -> usize {
        argmax_lowest(&self.category_logits)
    }
}

/// Coverage of every patch of every view by `bbox`, in `[V, N]` order.
/// `patch_px` is the side of one grid cell in pixels.
pub fn proposal_coverage(frames: &[CameraFrame], patch_px: usize, bbox: &Aabb) -> Vec<Coverage> {
    let mut out = Vec::new();
    for f in frames {
        let (hp, wp) = f.patch_grid(patch_px);
        for pr in 0..hp {
            for pc in 0..wp {
                out.push(patch_box_coverage(&f.patch_points(patch_px, pr, pc), bbox));
            }
        }
    }
    out
}

/// A pooled proposal feature and the patches it came from.
pub struct PooledObject<'t> {
    pub feature: Var<'t>,
    pub patches: Vec<usize>,
    pub fallback: bool,
}

/// Mean of the features of patches with coverage above one half, plus the
/// sinusoidal code of the box center. When no patch qualifies the single
/// highest-coverage valid patch is used; if every valid patch has zero
/// coverage, the one whose world coordinate is closest to the box center.
///
/// `features` is `[S, dim]` over all slots of one episode, `world` is `[S, 3]`.
pub fn pool_object_feature<'t>(
    features: Var<'t>,
    world: &Tensor,
    valid: &[bool],
    coverage: &[Coverage],
    bbox: &Aabb,
    cfg: &PosEncConfig,
) -> Result<PooledObject<'t>, GroundingError> {
    let slots = valid.len();
    let chosen: Vec<usize> = (0..slots).filter(|&i| valid[i] && coverage[i].eligible).collect();
    let (patches, fallback) = if chosen.is_empty() {
        (vec![fallback_patch(world, valid, coverage, bbox)?], true)
    } else {
        (chosen, false)
    };
    let mut weights = vec![0.0; slots];
    let share = 1.0 / patches.len() as f64;
    for &i in &patches {
        weights[i] = share;
    }
    let tape = features.tape();
    let mean = tape.constant(Tensor::new(vec![1, slots], weights)?).matmul_exact(features)?;
    let dim = cfg.dim;
    let code = sinusoidal_encode_3d(&Tensor::new(vec![1, 3], bbox.center().to_vec())?, cfg);
    let feature = mean.add(tape.constant(code))?.reshape(&[dim])?;
    Ok(PooledObject { feature, patches, fallback })
}

fn fallback_patch(world: &Tensor, valid: &[bool], coverage: &[Coverage], bbox: &Aabb) -> Result<usize, GroundingError> {
    let center = bbox.center();
    let dist = |i: usize| {
        let w = &world.data()[i * 3..i * 3 + 3];
        (0..3).map(|k| (w[k] - center[k]).powi(2)).sum::<f64>()
    };
    let mut best: Option<(usize, f64, f64)> = None;
    for i in (0..valid.len()).filter(|&i| valid[i]) {
        let (frac, d) = (coverage[i].fraction, dist(i));
        let better = match best {
            None => true,
            Some((_, bf, bd)) => frac > bf || (frac == bf && d < bd),
        };
        if better {
            best = Some((i, frac, d));
        }
    }
    best.map(|b| b.0).ok_or(GroundingError::NoPatch)
}

/// Cosine similarities of every row of `objects` (`[P, dim]`) with `h`
/// (`[dim]`). A zero vector has similarity 0 with everything.
pub fn cosine_similarities<'t>(h: Var<'t>, objects: Var<'t>) -> Result<Var<'t>, DiffError> {
    let dim = h.shape()[0];
    if h.value().data().iter().all(|x| *x == 0.0) {
        log::warn!("ground state has zero norm; similarities are 0");
    }
    let hn = h.normalize(0)?.reshape(&[dim, 1])?;
    let on = objects.normalize(1)?;
    let p = objects.shape()[0];
    on.matmul(hn)?.reshape(&[p])
}

/// Cross-entropy of `softmax(similarities / tau)` against `target`.
pub fn infonce_from_similarities<'t>(similarities: Var<'t>, target: usize, tau: f64) -> Result<Var<'t>, GroundingError> {
    let count = similarities.shape()[0];
    if count == 0 {
        return Err(GroundingError::NoProposals);
    }
    if target >= count {
        return Err(GroundingError::Target { target, count });
    }
    Ok(similarities.scale(1.0 / tau).log_softmax(0)?.gather(0, &[target])?.sum_all().scale(-1.0))
}

/// Contrastive grounding loss of the `<ground>` state against the pooled
/// proposal features; negatives are the other proposals of the scene.
pub fn infonce_ground<'t>(h: Var<'t>, objects: Var<'t>, target: usize, tau: f64) -> Result<Var<'t>, GroundingError> {
    if objects.shape()[0] == 0 {
        return Err(GroundingError::NoProposals);
    }
    infonce_from_similarities(cosine_similarities(h, objects)?, target, tau)
}

/// Softmax cross-entropy over the category vocabulary.
pub fn language_loss<'t>(logits: Var<'t>, gt_category: usize) -> Result<Var<'t>, GroundingError> {
    let count = logits.shape()[0];
    if gt_category >= count {
        return Err(GroundingError::Category(gt_category));
    }
    Ok(logits.log_softmax(0)?.gather(0, &[gt_category])?.sum_all().scale(-1.0))
}

/// `lambda_g * ground + lambda_r * recon + lambda_l * lang`. A missing recon
/// term (spatial guidance off) is left out rather than multiplied by zero.
pub fn total_loss<'t>(ground: Var<'t>, recon: Option<Var<'t>>, lang: Var<'t>, w: &LossWeights) -> Result<Var<'t>, GroundingError> {
    let check = |component: &'static str, v: Var<'t>| {
        let value = v.item();
        if value.is_finite() {
            Ok(v)
        } else {
            Err(GroundingError::NonFinite { component, value })
        }
    };
    let mut total = check("L_ground", ground)?.scale(w.lambda_g);
    if let Some(r) = recon {
        total = total.add(check("L_recon", r)?.scale(w.lambda_r))?;
    }
    Ok(total.add(check("L_lang", lang)?.scale(w.lambda_l))?)
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Id of the most similar proposal; exact ties go to the lowest id.
pub fn predict_target(ids: &[usize], similarities: &[f64]) -> usize {
    assert!(!ids.is_empty() && ids.len() == similarities.len(), "one similarity per proposal");
    let mut best = 0;
    for i in 1..ids.len() {
        let (s, b) = (similarities[i], similarities[best]);
        if s > b || (s == b && ids[i] < ids[best]) {
            best = i;
        }
    }
    ids[best]
}

pub fn render_answer(category: usize) -> String {
    let name = CATEGORIES.get(category).map_or("object", |c| c.name);
    format!("The {name} is located at <ground>")
}
