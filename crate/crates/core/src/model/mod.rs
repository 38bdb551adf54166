//! The micro grounding transformer: patch embedding, position-aware pooling,
//! structure-enhanced blocks, a joint fusion transformer over visual tokens,
//! query tokens and a trailing `<ground>` token, and the grounding, category
//! and reconstruction heads.

mod eval;
mod prepare;
mod train;

pub use eval::{classify_error, evaluate, ErrorKind, EvalReport, Grounder, OracleGrounder, Prediction, RandomGrounder, SubsetStats};
pub use prepare::{prepare_episode, prepare_episodes, token_vocabulary, PrepareError, PreparedEpisode, ProposalSetting};
pub use train::{lr_schedule, train, StepLog, TrainError};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::{read_checkpoint, write_checkpoint, Bound, CheckpointError, DiffError, ParamId, ParamStore, Tensor, Var};
use crate::grounding::{
    cosine_similarities, infonce_from_similarities, language_loss, pool_object_feature, predict_target, total_loss, GroundingError, GroundingOutput,
    LossWeights, DEFAULT_TAU,
};
use crate::nn::{expand_mask, FeedForward, LayerNorm, Linear};
use crate::posenc::{apply_pooling, avg_pool_patches, fuse_multilevel, pool_matrix, PatchGrid, PosEncConfig, RayMlp};
use crate::recon::{recon_loss_total, PointMapPrediction, ReconBranch, ReconConfig, ReconError};
use crate::se_attention::{attend, se_block, AttentionParams, SeBlock};
use crate::synthscene::CATEGORIES;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("no valid patch in any view")]
    Degenerate,
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Components that can be switched off for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    /// Reconstruction branch and its loss during training.
    pub spatial_guidance: bool,
    /// Sinusoidal world-coordinate code and ray code on patch tokens.
    pub position_encoding: bool,
    /// Intra/inter-view attention blocks.
    pub structure_attention: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            spatial_guidance: true,
            position_encoding: true,
            structure_attention: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoSg,
    NoMpe,
    NoAttn,
    NoLg,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::NoSg, Ablation::NoMpe, Ablation::NoAttn, Ablation::NoLg];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSg => "no-sg",
            Ablation::NoMpe => "no-mpe",
            Ablation::NoAttn => "no-attn",
            Ablation::NoLg => "no-lg",
        }
    }

    /// Accepts both `no-sg` and the bare component name `sg`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.strip_prefix("no-").unwrap_or(s);
        match s {
            "full" => Some(Ablation::Full),
            "sg" => Some(Ablation::NoSg),
            "mpe" => Some(Ablation::NoMpe),
            "attn" => Some(Ablation::NoAttn),
            "lg" => Some(Ablation::NoLg),
            _ => None,
        }
    }

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoSg => c.components.spatial_guidance = false,
            Ablation::NoMpe => c.components.position_encoding = false,
            Ablation::NoAttn => c.components.structure_attention = false,
            Ablation::NoLg => c.loss.lambda_l = 0.0,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 12,
            batch_size: 8,
            warmup_ratio: 0.05,
            weight_decay: 0.0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub patch_size: usize,
    /// Width of the per-pixel GELU layer ahead of the patch embedding; 0
    /// embeds raw patch colors linearly.
    pub pixel_stem: usize,
    pub heads: usize,
    pub se_blocks: usize,
    pub fusion_blocks: usize,
    pub max_query_len: usize,
    pub tau: f64,
    pub posenc: PosEncConfig,
    pub recon: ReconConfig,
    pub loss: LossWeights,
    pub components: Components,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            patch_size: 8,
            pixel_stem: 0,
            heads: 4,
            se_blocks: 2,
            fusion_blocks: 2,
            max_query_len: 16,
            tau: DEFAULT_TAU,
            posenc: PosEncConfig::default(),
            recon: ReconConfig::default(),
            loss: LossWeights::default(),
            components: Components::default(),
            train: TrainConfig::default(),
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.dim == 0 || self.patch_size == 0 || self.heads == 0 || self.max_query_len == 0 {
            return bad("dim, patch_size, heads and max_query_len must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.posenc.dim != self.dim {
            return bad(format!("posenc.dim {} differs from dim {}", self.posenc.dim, self.dim));
        }
        self.posenc.validate().map_err(ModelError::Config)?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.recon.alpha >= 0.0 && self.recon.alpha.is_finite()) {
            return bad(format!("recon.alpha must be non-negative, got {}", self.recon.alpha));
        }
        self.loss.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.batch_size == 0 || t.workers == 0 {
            return bad("train.lr, train.batch_size and train.workers must be positive".into());
        }
        if !(0.0..1.0).contains(&t.warmup_ratio) || !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return bad("train.warmup_ratio must be in [0, 1) and train.weight_decay finite and >= 0".into());
        }
        Ok(())
    }

    /// Side in pixels of one token after pooling.
    pub fn region_px(&self) -> usize {
        self.patch_size * self.posenc.pool_kernel
    }
}

/// Forward mode. Inference never builds or runs the reconstruction branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
struct FusionBlock {
    attn: AttentionParams,
    ffn: FeedForward,
}

#[derive(Debug)]
pub struct ToyGrounder {
    pub config: ModelConfig,
    pub store: ParamStore,
    pixel_embed: Option<Linear>,
    patch_embed: Linear,
    ray_mlp: RayMlp,
    se: Vec<SeBlock>,
    token_embed: ParamId,
    position_embed: ParamId,
    ground_token: ParamId,
    fusion: Vec<FusionBlock>,
    final_norm: LayerNorm,
    ground_head: Linear,
    category_head: Linear,
    recon: Option<ReconBranch>,
}

pub const RECON_PREFIX: &str = "recon.";

impl ToyGrounder {
    /// Builds a freshly initialized model. The reconstruction branch exists
    /// only for `Mode::Train` with spatial guidance on; its parameters are
    /// created last so every other parameter has the same name, shape and
    /// initial value in both modes.
    pub fn new(config: ModelConfig, mode: Mode) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (d, h) = (config.dim, config.heads);
        let pixel_embed = (config.pixel_stem > 0).then(|| Linear::new(&mut store, "embed.pixel", 3, config.pixel_stem, true, &mut rng));
        let patch_in = config.patch_size * config.patch_size * if config.pixel_stem > 0 { config.pixel_stem } else { 3 };
        let patch_embed = Linear::new(&mut store, "embed.patch", patch_in, d, true, &mut rng);
        let ray_mlp = RayMlp::new(&mut store, "posenc.ray", &config.posenc, &mut rng);
        let se = (0..config.se_blocks)
            .map(|i| SeBlock::new(&mut store, &format!("se{i}"), d, h, &mut rng))
            .collect();
        let vocab = token_vocabulary().len();
        let token_embed = store.add("embed.token", Tensor::randn(&mut rng, &[vocab, d], 1.0));
        let position_embed = store.add("embed.position", Tensor::randn(&mut rng, &[config.max_query_len, d], 0.1));
        let ground_token = store.add("embed.ground", Tensor::randn(&mut rng, &[d], 1.0));
        let fusion = (0..config.fusion_blocks)
            .map(|i| FusionBlock {
                attn: AttentionParams {
                    exact_mixing: false,
                    ..AttentionParams::new(&mut store, &format!("fusion{i}.attn"), d, h, &mut rng)
                },
                ffn: FeedForward::new(&mut store, &format!("fusion{i}.ffn"), d, 2 * d, &mut rng),
            })
            .collect();
        let final_norm = LayerNorm::new(&mut store, "fusion.norm", d);
        let ground_head = Linear::new(&mut store, "head.ground", d, d, true, &mut rng);
        let category_head = Linear::new(&mut store, "head.category", d, CATEGORIES.len(), true, &mut rng);
        let recon =
            (mode == Mode::Train && config.components.spatial_guidance).then(|| ReconBranch::new(&mut store, "recon", d, h, &config.recon, &mut rng));
        Ok(Self {
            config,
            store,
            pixel_embed,
            patch_embed,
            ray_mlp,
            se,
            token_embed,
            position_embed,
            ground_token,
            fusion,
            final_norm,
            ground_head,
            category_head,
            recon,
        })
    }

    pub fn has_recon(&self) -> bool {
        self.recon.is_some()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Ids of the reconstruction-branch parameters (empty in inference mode).
    pub fn recon_parameters(&self) -> Vec<ParamId> {
        (0..self.store.len())
            .map(ParamId)
            .filter(|&id| self.store.name(id).starts_with(RECON_PREFIX))
            .collect()
    }

    pub fn save(&self) -> Vec<u8> {
        write_checkpoint(&self.store.to_entries())
    }

    /// Loads parameters by name. Reconstruction entries are skipped when this
    /// model has no reconstruction branch; anything else missing, extra or
    /// mis-shaped is a mismatch.
    pub fn load(&mut self, bytes: &[u8]) -> Result<(), ModelError> {
        let entries = read_checkpoint(bytes)?;
        let mut seen = vec![false; self.store.len()];
        for (name, t) in entries {
            let id = (0..self.store.len()).map(ParamId).find(|&id| self.store.name(id) == name);
            match id {
                Some(id) => {
                    if self.store.get(id).shape() != t.shape() {
                        return Err(ModelError::Mismatch(format!(
                            "{name}: checkpoint {:?} vs model {:?}",
                            t.shape(),
                            self.store.get(id).shape()
                        )));
                    }
                    *self.store.get_mut(id) = t;
                    seen[id.0] = true;
                }
                None if name.starts_with(RECON_PREFIX) && !self.has_recon() => {}
                None => return Err(ModelError::Mismatch(format!("unexpected parameter {name}"))),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ModelError::Mismatch(format!("missing parameter {}", self.store.name(ParamId(i)))));
        }
        Ok(())
    }
}

/// Patch embedding of one prepared episode: features `[1, V, N, dim]` at the
/// fine patch resolution with world coordinates, rays and validity.
pub fn encode_views<'t>(p: &Bound<'_, 't>, model: &ToyGrounder, ep: &PreparedEpisode) -> Result<PatchGrid<'t>, ModelError> {
    if !ep.valid.iter().any(|v| *v) {
        return Err(ModelError::Degenerate);
    }
    let tape = p.tape();
    let d = model.config.dim;
    let mut x = tape.constant(ep.patches.clone());
    if let Some(stem) = &model.pixel_embed {
        let n = ep.views * ep.hp * ep.wp;
        let pixels = model.config.patch_size * model.config.patch_size;
        x = stem
            .forward(p, x.reshape(&[n * pixels, 3])?)?
            .gelu()
            .reshape(&[1, ep.views, ep.hp * ep.wp, pixels * stem.fan_out])?;
    }
    let x = model.patch_embed.forward(p, x)?;
    let mask = tape.constant(expand_mask(&ep.valid, d).reshaped(&[1, ep.views, ep.hp * ep.wp, d])?);
    Ok(PatchGrid {
        features: x.mul(mask)?,
        world_coords: ep.world.clone(),
        ray_dirs: ep.rays.clone(),
        valid: ep.valid.clone(),
        pooled_rays: Some(ep.pooled_rays.clone()),
        batch: 1,
        views: ep.views,
        hp: ep.hp,
        wp: ep.wp,
    })
}

/// Differentiable outputs of one forward pass.
pub struct ForwardPass<'t> {
    pub ground_state: Var<'t>,
    pub object_features: Var<'t>,
    pub similarities: Var<'t>,
    pub category_logits: Var<'t>,
    pub recon: Option<PointMapPrediction<'t>>,
    pub fallback: Vec<bool>,
}

impl ForwardPass<'_> {
    pub fn detach(&self, ep: &PreparedEpisode) -> GroundingOutput {
        let similarities = self.similarities.value().data().to_vec();
        GroundingOutput {
            ground_state: self.ground_state.value().data().to_vec(),
            object_features: (*self.object_features.value()).clone(),
            predicted_id: predict_target(&ep.proposal_ids, &similarities),
            similarities,
            category_logits: self.category_logits.value().data().to_vec(),
            fallback: self.fallback.clone(),
        }
    }
}

pub fn forward<'t>(p: &Bound<'_, 't>, model: &ToyGrounder, ep: &PreparedEpisode, mode: Mode) -> Result<ForwardPass<'t>, ModelError> {
    let cfg = &model.config;
    let tape = p.tape();
    let d = cfg.dim;
    let grid = encode_views(p, model, ep)?;

    let pooled = if cfg.components.position_encoding {
        fuse_multilevel(p, &grid, &cfg.posenc, &model.ray_mlp)?
    } else {
        let pool = pool_matrix(1, grid.views, grid.hp, grid.wp, cfg.posenc.pool_kernel, &grid.valid);
        PatchGrid {
            features: avg_pool_patches(grid.features, &pool)?,
            world_coords: apply_pooling(&pool, &grid.world_coords),
            ray_dirs: ep.pooled_rays.clone(),
            valid: pool.valid,
            pooled_rays: None,
            batch: 1,
            views: grid.views,
            hp: pool.hp,
            wp: pool.wp,
        }
    };
    let valid = pooled.valid.clone();
    let mut visual = pooled.features;
    if cfg.components.structure_attention {
        for blk in &model.se {
            visual = se_block(p, blk, visual, &valid)?;
        }
    }

    let recon = match (&model.recon, mode) {
        (Some(branch), Mode::Train) => Some(branch.forward(p, visual, &valid)?),
        _ => None,
    };

    let slots = valid.len();
    let flat = visual.reshape(&[slots, d])?;
    let q = ep.tokens.len();
    if q > cfg.max_query_len {
        return Err(ModelError::Config(format!(
            "query of {q} tokens exceeds max_query_len {}",
            cfg.max_query_len
        )));
    }
    let words = p.var(model.token_embed).gather(0, &ep.tokens)?;
    let positions: Vec<usize> = (0..q).collect();
    let words = words.add(p.var(model.position_embed).gather(0, &positions)?)?;
    let ground = p.var(model.ground_token).reshape(&[1, d])?;
    let len = slots + q + 1;
    let mut seq = tape.concat(&[flat, words, ground], 0)?.reshape(&[1, len, d])?;
    let mut keep = valid.clone();
    keep.extend(std::iter::repeat_n(true, q + 1));
    let gate = tape.constant(expand_mask(&keep, d).reshaped(&[1, len, d])?);
    for blk in &model.fusion {
        seq = attend(p, &blk.attn, seq, &keep)?.0;
        let y = blk.ffn.forward(p, seq)?;
        seq = seq.add(y.sub(seq)?.mul(gate)?)?;
    }
    let last = model.final_norm.forward(p, seq)?.reshape(&[len, d])?.gather(0, &[len - 1])?;
    let ground_state = model.ground_head.forward(p, last)?.reshape(&[d])?;
    let category_logits = model.category_head.forward(p, last)?.reshape(&[CATEGORIES.len()])?;

    let mut rows = Vec::with_capacity(ep.proposal_ids.len());
    let mut fallback = Vec::with_capacity(ep.proposal_ids.len());
    for (bbox, coverage) in ep.proposal_boxes.iter().zip(&ep.coverage) {
        let obj = pool_object_feature(flat, &pooled.world_coords, &valid, coverage, bbox, &cfg.posenc)?;
        fallback.push(obj.fallback);
        rows.push(obj.feature.reshape(&[1, d])?);
    }
    let object_features = tape.concat(&rows, 0)?;
    let similarities = cosine_similarities(ground_state, object_features)?;
    Ok(ForwardPass {
        ground_state,
        object_features,
        similarities,
        category_logits,
        recon,
        fallback,
    })
}

/// Scalar losses of one episode; `recon` is absent without spatial guidance.
pub struct EpisodeLoss<'t> {
    pub ground: Var<'t>,
    pub recon: Option<Var<'t>>,
    pub lang: Var<'t>,
    pub total: Var<'t>,
}

pub fn episode_loss<'t>(model: &ToyGrounder, ep: &PreparedEpisode, out: &ForwardPass<'t>) -> Result<EpisodeLoss<'t>, ModelError> {
    let cfg = &model.config;
    let ground = infonce_from_similarities(out.similarities, ep.target_index, cfg.tau)?;
    let lang = language_loss(out.category_logits, ep.target_category)?;
    let recon = match &out.recon {
        Some(pred) => Some(recon_loss_total(pred, &ep.gt_maps, cfg.recon.alpha, cfg.recon.reg_sign)?),
        None => None,
    };
    let total = total_loss(ground, recon, lang, &cfg.loss)?;
    Ok(EpisodeLoss { ground, recon, lang, total })
}

/// Inference on one episode with the model's own tape.
pub fn infer(model: &ToyGrounder, ep: &PreparedEpisode) -> Result<GroundingOutput, ModelError> {
    let tape = crate::diffkit::Tape::new();
    let p = model.store.bind(&tape);
    Ok(forward(&p, model, ep, Mode::Infer)?.detach(ep))
}

#[cfg(test)]
mod tests;
