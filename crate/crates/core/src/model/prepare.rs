//! Per-episode inputs that do not depend on parameters, computed once.

use thiserror::Error;

use crate::diffkit::Tensor;
use crate::geometry::{Aabb, Coverage};
use crate::grounding::proposal_coverage;
use crate::recon::{gt_pointmaps_from_frames, GtPointMaps};
use crate::synthscene::{jitter_proposals, GroundingEpisode, ObjectProposal, Uniqueness, CATEGORIES, QUERY_VOCAB};

use super::ModelConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrepareError {
    #[error("episode has no frames")]
    NoFrames,
    #[error("frames differ in size")]
    FrameSize,
    #[error("unknown query token {0:?}")]
    Token(String),
    #[error("target {0} is not among the proposals")]
    Target(usize),
    #[error("target category {0} outside the vocabulary")]
    Category(usize),
}

/// Query words followed by category names.
pub fn token_vocabulary() -> Vec<&'static str> {
    QUERY_VOCAB.iter().copied().chain(CATEGORIES.iter().map(|c| c.name)).collect()
}

/// Candidate boxes offered to the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProposalSetting {
    GroundTruth,
    /// Ground-truth boxes with log-normal size and Gaussian center noise.
    Jitter {
        sigma_scale: f64,
        sigma_center: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub views: usize,
    pub hp: usize,
    pub wp: usize,
    /// `[1, V, N, patch * patch * 3]` colors in `[0, 1]`, row-major pixels.
    pub patches: Tensor,
    /// `[1, V, N, 3]` patch mean world points.
    pub world: Tensor,
    /// `[1, V, N, 3]` unit patch-center ray directions.
    pub rays: Tensor,
    /// `[1, V, N', 3]` ray directions through pooled-region centers.
    pub pooled_rays: Tensor,
    pub valid: Vec<bool>,
    pub gt_maps: GtPointMaps,
    pub tokens: Vec<usize>,
    pub proposal_ids: Vec<usize>,
    pub proposal_boxes: Vec<Aabb>,
    pub proposal_categories: Vec<usize>,
    /// Per proposal, coverage of every pooled token in `[V, N']` order.
    pub coverage: Vec<Vec<Coverage>>,
    pub target_id: usize,
    pub target_index: usize,
    pub target_category: usize,
    pub target_box: Aabb,
    pub uniqueness: Uniqueness,
}

impl PreparedEpisode {
    pub fn num_proposals(&self) -> usize {
        self.proposal_ids.len()
    }
}

fn ray_rows(rays: &[Option<crate::geometry::Ray>]) -> impl Iterator<Item = f64> + '_ {
    rays.iter().flat_map(|r| r.map_or([0.0; 3], |r| r.direction))
}

pub fn prepare_episode(ep: &GroundingEpisode, cfg: &ModelConfig, setting: ProposalSetting) -> Result<PreparedEpisode, PrepareError> {
    let first = ep.frames.first().ok_or(PrepareError::NoFrames)?;
    let (w, h) = (first.width(), first.height());
    if ep.frames.iter().any(|f| f.width() != w || f.height() != h) {
        return Err(PrepareError::FrameSize);
    }
    let ps = cfg.patch_size;
    let region = cfg.region_px();
    let (hp, wp) = first.patch_grid(ps);
    let views = ep.frames.len();
    let n = hp * wp;

    let mut patches = Vec::with_capacity(views * n * ps * ps * 3);
    let (mut world, mut rays, mut pooled_rays, mut valid) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for f in &ep.frames {
        for pr in 0..hp {
            for pc in 0..wp {
                for v in pr * ps..pr * ps + ps {
                    for u in pc * ps..pc * ps + ps {
                        let rgb = if u < w && v < h { f.rgb_at(u, v) } else { [0.0; 3] };
                        patches.extend_from_slice(&rgb);
                    }
                }
            }
        }
        let pm = f.patch_mean_world(ps);
        world.extend(pm.means.iter().flatten());
        valid.extend_from_slice(&pm.valid);
        rays.extend(ray_rows(&f.patch_center_ray(ps)));
        pooled_rays.extend(ray_rows(&f.patch_center_ray(region)));
    }
    let (php, pwp) = first.patch_grid(region);

    let proposals: Vec<ObjectProposal> = match setting {
        ProposalSetting::GroundTruth => ep.proposals.clone(),
        ProposalSetting::Jitter {
            sigma_scale,
            sigma_center,
            seed,
        } => jitter_proposals(&ep.proposals, seed ^ ep.scene.seed, sigma_scale, sigma_center, &ep.scene.room),
    };
    let vocab = token_vocabulary();
    let tokens = ep
        .query
        .tokens
        .iter()
        .map(|t| vocab.iter().position(|v| v == t).ok_or_else(|| PrepareError::Token(t.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let target_index = proposals
        .iter()
        .position(|p| p.id == ep.target_id)
        .ok_or(PrepareError::Target(ep.target_id))?;
    let target_category = ep.target_category();
    if target_category >= CATEGORIES.len() {
        return Err(PrepareError::Category(target_category));
    }
    Ok(PreparedEpisode {
        views,
        hp,
        wp,
        patches: Tensor::new(vec![1, views, n, ps * ps * 3], patches).expect("sized"),
        world: Tensor::new(vec![1, views, n, 3], world).expect("sized"),
        rays: Tensor::new(vec![1, views, n, 3], rays).expect("sized"),
        pooled_rays: Tensor::new(vec![1, views, php * pwp, 3], pooled_rays).expect("sized"),
        valid,
        gt_maps: gt_pointmaps_from_frames(std::slice::from_ref(&ep.frames), region),
        tokens,
        proposal_ids: proposals.iter().map(|p| p.id).collect(),
        proposal_categories: proposals.iter().map(|p| p.gt_category).collect(),
        coverage: proposals.iter().map(|p| proposal_coverage(&ep.frames, region, &p.bbox)).collect(),
        proposal_boxes: proposals.into_iter().map(|p| p.bbox).collect(),
        target_id: ep.target_id,
        target_index,
        target_category,
        target_box: ep.target_box(),
        uniqueness: ep.query.uniqueness,
    })
}

pub fn prepare_episodes(eps: &[GroundingEpisode], cfg: &ModelConfig, setting: ProposalSetting) -> Result<Vec<PreparedEpisode>, PrepareError> {
    eps.iter().map(|e| prepare_episode(e, cfg, setting)).collect()
}
