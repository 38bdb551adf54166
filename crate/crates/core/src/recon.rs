//! Training-only pointmap reconstruction: a small decoder that predicts
//! per-patch local (camera-frame) and global (world-frame) points with
//! confidences, and the scale-normalized, confidence-weighted losses that
//! supervise it.

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::{Bound, DiffError, ParamStore, Tensor, Var};
use crate::geometry::CameraFrame;
use crate::nn::{expand_mask, Linear};
use crate::se_attention::{se_block, SeBlock};

thread_local! {
    static DECODER_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Decoder invocations on this thread since start.
pub fn decoder_calls() -> u64 {
    DECODER_CALLS.with(|c| c.get())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconError {
    #[error("degenerate scene: mean point norm is zero in group {group}")]
    Degenerate { group: usize },
    #[error("no valid points to supervise")]
    EmptyMask,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Sign of the `alpha * log(conf)` confidence term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegSign {
    /// `- alpha * log(conf)`: confidence is rewarded where the error is small.
    Reward,
    /// `+ alpha * log(conf)`: confidence is penalized everywhere and sinks to its floor.
    Penalize,
}

impl std::str::FromStr for RegSign {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reward" => Ok(RegSign::Reward),
            "penalize" => Ok(RegSign::Penalize),
            other => Err(format!("expected reward|penalize, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub alpha: f64,
    pub reg_sign: RegSign,
    pub decoder_blocks: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            reg_sign: RegSign::Reward,
            decoder_blocks: 1,
        }
    }
}

/// Normalization scope of the scale-invariant regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScope {
    /// One scale per view (local maps).
    PerView,
    /// One scale per multi-view set (global maps).
    AllViews,
}

pub struct PointMapPrediction<'t> {
    /// `[B, V, N, 3]` camera-frame points.
    pub local_points: Var<'t>,
    /// `[B, V, N, 3]` world-frame points.
    pub global_points: Var<'t>,
    /// `[B, V, N]` raw confidences; the weight is `1 + exp(conf)`.
    pub local_conf: Var<'t>,
    pub global_conf: Var<'t>,
}

/// Projection layer followed by the decoder: SE blocks and two linear heads
/// emitting `(x, y, z, conf)` per patch.
#[derive(Debug, Clone)]
pub struct ReconBranch {
    pub projection: Linear,
    pub blocks: Vec<SeBlock>,
    pub local_head: Linear,
    pub global_head: Linear,
}

impl ReconBranch {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, cfg: &ReconConfig, rng: &mut R) -> Self {
        Self {
            projection: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng),
            blocks: (0..cfg.decoder_blocks)
                .map(|i| SeBlock::new(store, &format!("{name}.dec{i}"), dim, heads, rng))
                .collect(),
            local_head: Linear::new(store, &format!("{name}.local"), dim, 4, true, rng),
            global_head: Linear::new(store, &format!("{name}.global"), dim, 4, true, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'_, 't>, features: Var<'t>, valid: &[bool]) -> Result<PointMapPrediction<'t>, DiffError> {
        let projected = self.projection.forward(p, features)?;
        recon_decoder(p, self, projected, valid)
    }
}

fn split_head<'t>(y: Var<'t>) -> Result<(Var<'t>, Var<'t>), DiffError> {
    let s = y.shape();
    let rows: usize = s[..s.len() - 1].iter().product();
    let flat = y.reshape(&[rows, 4])?;
    let pts = flat.gather(1, &[0, 1, 2])?.reshape(&[s[0], s[1], s[2], 3])?;
    let conf = flat.gather(1, &[3])?.reshape(&[s[0], s[1], s[2]])?;
    Ok((pts, conf))
}

/// Decodes already-projected `[B, V, N, dim]` features into point maps.
pub fn recon_decoder<'t>(p: &Bound<'_, 't>, branch: &ReconBranch, features: Var<'t>, valid: &[bool]) -> Result<PointMapPrediction<'t>, DiffError> {
    DECODER_CALLS.with(|c| c.set(c.get() + 1));
    let mut x = features;
    for blk in &branch.blocks {
        x = se_block(p, blk, x, valid)?;
    }
    let (local_points, local_conf) = split_head(branch.local_head.forward(p, x)?)?;
    let (global_points, global_conf) = split_head(branch.global_head.forward(p, x)?)?;
    Ok(PointMapPrediction {
        local_points,
        global_points,
        local_conf,
        global_conf,
    })
}

fn groups(shape: &[usize], scope: NormScope) -> (usize, usize) {
    let (b, v, n) = (shape[0], shape[1], shape[2]);
    match scope {
        NormScope::PerView => (b * v, n),
        NormScope::AllViews => (b, v * n),
    }
}

/// `[G]` -> `[G, width]` by repetition.
fn repeat_cols<'t>(x: Var<'t>, width: usize) -> Result<Var<'t>, DiffError> {
    let g = x.shape()[0];
    x.reshape(&[g, 1])?.matmul(x.tape().constant(Tensor::full(&[1, width], 1.0)))
}

/// Divides every point by the mean norm of the valid points in its group.
fn normalize_by_mean_norm<'t>(x: Var<'t>, valid: &[bool], scope: NormScope) -> Result<Var<'t>, ReconError> {
    let shape = x.shape();
    let (g, m) = groups(&shape, scope);
    let tape = x.tape();
    let mask = Tensor::new(vec![g, m], valid.iter().map(|&b| b as u8 as f64).collect()).map_err(ReconError::Diff)?;
    let norms = x.reshape(&[g, m, 3])?.l2_norm(2)?.mul(tape.constant(mask.clone()))?;
    let sums = norms.sum(1)?;
    let mut inv_count = Vec::with_capacity(g);
    for (gi, row) in mask.data().chunks(m).enumerate() {
        let c: f64 = row.iter().sum();
        if c == 0.0 {
            return Err(ReconError::EmptyMask);
        }
        if sums.value().data()[gi] == 0.0 {
            return Err(ReconError::Degenerate { group: gi });
        }
        inv_count.push(1.0 / c);
    }
    let z = sums.mul(tape.constant(Tensor::vector(&inv_count)))?;
    let scale = repeat_cols(z.recip()?, m * 3)?;
    Ok(x.reshape(&[g, m * 3])?.mul(scale)?.reshape(&shape)?)
}

/// Per-point `|pred / z_pred - gt / z_gt|`, each side scaled by its own mean
/// point norm over the valid points of a group. Returns `[B, V, N]`, zero at
/// invalid points.
pub fn regr_loss<'t>(pred: Var<'t>, gt: &Tensor, valid: &[bool], scope: NormScope) -> Result<Var<'t>, ReconError> {
    let tape = pred.tape();
    let pn = normalize_by_mean_norm(pred, valid, scope)?;
    let gn = normalize_by_mean_norm(tape.constant(gt.clone()), valid, scope)?;
    let shape = pred.shape();
    let dist = pn.sub(gn)?.l2_norm(3)?;
    let mask = Tensor::new(shape[..3].to_vec(), valid.iter().map(|&b| b as u8 as f64).collect()).map_err(ReconError::Diff)?;
    Ok(dist.mul(tape.constant(mask))?)
}

/// Mean over valid points of `(1 + exp(conf)) * err -/+ alpha * log(1 + exp(conf))`.
pub fn conf_weighted_loss<'t>(
    points: Var<'t>,
    conf: Var<'t>,
    gt: &Tensor,
    valid: &[bool],
    alpha: f64,
    sign: RegSign,
    scope: NormScope,
) -> Result<Var<'t>, ReconError> {
    let tape = points.tape();
    let err = regr_loss(points, gt, valid, scope)?;
    let weight = conf.exp().add_scalar(1.0);
    let s = match sign {
        RegSign::Reward => -alpha,
        RegSign::Penalize => alpha,
    };
    let per_point = weight.mul(err)?.add(weight.log()?.scale(s))?;
    let count = valid.iter().filter(|b| **b).count();
    if count == 0 {
        return Err(ReconError::EmptyMask);
    }
    let mask = Tensor::new(err.shape(), valid.iter().map(|&b| b as u8 as f64).collect()).map_err(ReconError::Diff)?;
    Ok(per_point.mul(tape.constant(mask))?.sum_all().scale(1.0 / count as f64))
}

/// Ground-truth point maps for a batch of multi-view frames at patch
/// resolution. All outputs are `[B, V, N, 3]` / `B * V * N`.
#[derive(Debug, Clone, PartialEq)]
pub struct GtPointMaps {
    pub local: Tensor,
    pub global: Tensor,
    pub valid: Vec<bool>,
}

/// Sum of the local (per-view scale) and global (per-set scale) branch losses.
pub fn recon_loss_total<'t>(pred: &PointMapPrediction<'t>, gt: &GtPointMaps, alpha: f64, sign: RegSign) -> Result<Var<'t>, ReconError> {
    let global = conf_weighted_loss(
        pred.global_points,
        pred.global_conf,
        &gt.global,
        &gt.valid,
        alpha,
        sign,
        NormScope::AllViews,
    )?;
    let local = conf_weighted_loss(pred.local_points, pred.local_conf, &gt.local, &gt.valid, alpha, sign, NormScope::PerView)?;
    Ok(global.add(local)?)
}

/// Global map: mean world point of every patch; local map: the same points in
/// each view's camera frame. `batch` holds the views of each batch element.
pub fn gt_pointmaps_from_frames(batch: &[Vec<CameraFrame>], patch_size: usize) -> GtPointMaps {
    let (mut local, mut global, mut valid) = (Vec::new(), Vec::new(), Vec::new());
    let views = batch.first().map_or(0, Vec::len);
    let mut n = 0;
    for frames in batch {
        assert_eq!(frames.len(), views, "every batch element needs the same view count");
        for f in frames {
            let pm = f.patch_mean_world(patch_size);
            n = pm.means.len();
            for (p, &ok) in pm.means.iter().zip(&pm.valid) {
                global.extend_from_slice(p);
                let c = if ok { f.extrinsics.world_to_cam(*p) } else { [0.0; 3] };
                local.extend_from_slice(&c);
                valid.push(ok);
            }
        }
    }
    let shape = vec![batch.len(), views, n, 3];
    GtPointMaps {
        local: Tensor::new(shape.clone(), local).expect("sized"),
        global: Tensor::new(shape, global).expect("sized"),
        valid,
    }
}

/// Zeroes features of invalid patches; helper for callers building inputs.
pub fn mask_features<'t>(x: Var<'t>, valid: &[bool]) -> Result<Var<'t>, DiffError> {
    let shape = x.shape();
    let d = *shape.last().expect("rank >= 1");
    x.mul(x.tape().constant(expand_mask(valid, d).reshaped(&shape)?))
}
