//! Procedural box rooms, a raycast RGB-D renderer, template referring
//! queries, and the on-disk episode format.

mod dataset;
mod query;
mod render;
mod scene;

pub use dataset::{decode_frame_blob, encode_frame_blob, parse_episode_line, read_dataset, write_dataset, DatasetError, EpisodeRecord, FRAME_MAGIC};
pub use query::{make_query, relation_holds, verify_query, Query, QueryError, Relation, Uniqueness, QUERY_VOCAB};
pub use render::{camera_ring, render_views, trace_ray, Hit, RigConfig};
pub use scene::{generate_scene, Category, SceneError, SceneObject, SceneSpec, CATEGORIES};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, CameraFrame};

/// A candidate object box offered to the grounding head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectProposal {
    pub id: usize,
    #[serde(rename = "box")]
    pub bbox: Aabb,
    pub gt_category: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingEpisode {
    pub scene: SceneSpec,
    pub frames: Vec<CameraFrame>,
    pub query: Query,
    pub proposals: Vec<ObjectProposal>,
    pub target_id: usize,
}

impl GroundingEpisode {
    pub fn target_box(&self) -> Aabb {
        self.scene.object(self.target_id).expect("target in scene").bbox
    }

    pub fn target_category(&self) -> usize {
        self.scene.object(self.target_id).expect("target in scene").category
    }
}

/// Deterministic child seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gt_proposals(scene: &SceneSpec) -> Vec<ObjectProposal> {
    scene
        .objects
        .iter()
        .map(|o| ObjectProposal {
            id: o.id,
            bbox: o.bbox,
            gt_category: o.category,
        })
        .collect()
}

/// Gaussian center noise (`sigma_center`, meters) and log-normal size noise
/// (`sigma_scale`); boxes are clipped to `room`.
pub fn jitter_proposals(proposals: &[ObjectProposal], seed: u64, sigma_scale: f64, sigma_center: f64, room: &Aabb) -> Vec<ObjectProposal> {
    if sigma_scale == 0.0 && sigma_center == 0.0 {
        return proposals.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    proposals
        .iter()
        .map(|p| {
            let c = p.bbox.center();
            let s = p.bbox.size();
            let c: [f64; 3] = std::array::from_fn(|i| c[i] + sigma_center * unit.sample(&mut rng));
            let s: [f64; 3] = std::array::from_fn(|i| s[i] * (sigma_scale * unit.sample(&mut rng)).exp());
            let b = Aabb::from_center_size(c, s);
            let min: [f64; 3] = std::array::from_fn(|i| b.min[i].clamp(room.min[i], room.max[i]));
            let max: [f64; 3] = std::array::from_fn(|i| b.max[i].clamp(room.min[i], room.max[i]));
            ObjectProposal {
                bbox: Aabb { min, max },
                ..p.clone()
            }
        })
        .collect()
}

/// Knobs for building a batch of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub num_objects: usize,
    pub rig: RigConfig,
    pub room_size: [f64; 3],
    pub max_attempts_per_episode: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_objects: 8,
            rig: RigConfig::default(),
            room_size: [6.0, 6.0, 2.5],
            max_attempts_per_episode: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenSummary {
    pub episodes: usize,
    pub unique: usize,
    pub multiple: usize,
    pub skipped: usize,
}

/// Builds episode `index` of the stream rooted at `seed`. Returns the episode
/// and how many candidate scenes were skipped for lack of a sound query.
pub fn make_episode(seed: u64, index: usize, cfg: &GenConfig) -> Result<(GroundingEpisode, usize), SceneError> {
    let base = derive_seed(seed, index as u64);
    for attempt in 0..cfg.max_attempts_per_episode {
        let s = derive_seed(base, attempt as u64);
        let scene = generate_scene(s, cfg.num_objects, cfg.room_size)?;
        let Ok(query) = make_query(&scene, derive_seed(s, 1)) else {
            continue;
        };
        let poses = camera_ring(&scene, &cfg.rig, derive_seed(s, 2));
        let frames = render_views(&scene, &poses, &cfg.rig.intrinsics());
        let target_id = query.target_id;
        let episode = GroundingEpisode {
            proposals: gt_proposals(&scene),
            scene,
            frames,
            query,
            target_id,
        };
        return Ok((episode, attempt));
    }
    Err(SceneError::NoQuery(cfg.max_attempts_per_episode))
}

/// `count` episodes from the stream rooted at `seed`.
pub fn generate_episodes(seed: u64, count: usize, cfg: &GenConfig) -> Result<(Vec<GroundingEpisode>, GenSummary), SceneError> {
    let mut out = Vec::with_capacity(count);
    let mut summary = GenSummary::default();
    for i in 0..count {
        let (ep, skipped) = make_episode(seed, i, cfg)?;
        summary.skipped += skipped;
        match ep.query.uniqueness {
            Uniqueness::Unique => summary.unique += 1,
            Uniqueness::Multiple => summary.multiple += 1,
        }
        out.push(ep);
    }
    summary.episodes = out.len();
    Ok((out, summary))
}
