//! Finite-difference suites shared by the unit tests and `g3dk gradcheck`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffkit::{finite_diff_check, finite_diff_check_many, finite_diff_check_params, DiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::grounding::infonce_ground;
use crate::model::{episode_loss, forward, prepare_episode, Mode, ModelConfig, ModelError, ProposalSetting, ToyGrounder, TrainConfig};
use crate::posenc::{ray_mlp_encode, PosEncConfig, RayMlp};
use crate::recon::{conf_weighted_loss, NormScope, ReconBranch, ReconConfig, ReconError, RegSign};
use crate::se_attention::{random_tokens, se_block, SeBlock};
use crate::synthscene::{make_episode, GenConfig, RigConfig};

pub const OP_THRESHOLD: f64 = 1e-4;
pub const BLOCK_THRESHOLD: f64 = 1e-4;
pub const MODEL_THRESHOLD: f64 = 1e-3;

/// Worst relative error seen for one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitCheck {
    pub name: String,
    pub worst: f64,
    pub threshold: f64,
}

impl UnitCheck {
    pub fn passed(&self) -> bool {
        self.worst < self.threshold
    }
}

/// Weighted sum with fixed pseudo-random weights: turns any tensor-valued op
/// into a scalar objective whose gradient exercises every output component.
pub(crate) fn probe<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>, DiffError> {
    let w = Tensor::from_fn(&y.shape(), |i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4);
    y.mul(tape.constant(w)).map(|v| v.sum_all())
}

fn fd1(rng: &mut ChaCha8Rng, shape: &[usize], f: impl for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, DiffError>) -> Result<f64, DiffError> {
    let x = Tensor::randn(rng, shape, 1.0);
    finite_diff_check(|tape, v| probe(tape, f(tape, v)?), &x, 1e-5)
}

fn fd2(
    rng: &mut ChaCha8Rng,
    sa: &[usize],
    sb: &[usize],
    f: impl for<'t> Fn(&'t Tape, Var<'t>, Var<'t>) -> Result<Var<'t>, DiffError>,
) -> Result<f64, DiffError> {
    let a = Tensor::randn(rng, sa, 1.0);
    let b = Tensor::randn(rng, sb, 1.0);
    finite_diff_check_many(|tape, xs| probe(tape, f(tape, xs[0], xs[1])?), &[a, b], 1e-5)
}

type OpCase = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64, DiffError>>;

fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("add_bcast", Box::new(|r| fd2(r, &[3, 4], &[4], |_, a, b| a.add(b)))),
        ("sub", Box::new(|r| fd2(r, &[3, 4], &[3, 4], |_, a, b| a.sub(b)))),
        ("mul_bcast", Box::new(|r| fd2(r, &[2, 3, 4], &[3, 4], |_, a, b| a.mul(b)))),
        ("mul_lhs_scalar", Box::new(|r| fd2(r, &[1], &[3, 2], |_, a, b| a.mul(b)))),
        ("scale", Box::new(|r| fd1(r, &[5], |_, a| Ok(a.scale(-1.7).add_scalar(0.3))))),
        ("exp", Box::new(|r| fd1(r, &[5], |_, a| Ok(a.exp())))),
        ("log", Box::new(|r| fd1(r, &[5], |_, a| a.mul(a)?.add_scalar(0.5).log()))),
        ("relu", Box::new(|r| fd1(r, &[6], |_, a| Ok(a.relu())))),
        ("gelu", Box::new(|r| fd1(r, &[6], |_, a| Ok(a.gelu())))),
        ("sqrt", Box::new(|r| fd1(r, &[4], |_, a| a.mul(a)?.add_scalar(0.2).sqrt()))),
        ("recip", Box::new(|r| fd1(r, &[4], |_, a| a.mul(a)?.add_scalar(0.5).recip()))),
        ("permute", Box::new(|r| fd1(r, &[2, 3, 4], |_, a| a.permute(&[1, 2, 0])))),
        ("reshape", Box::new(|r| fd1(r, &[2, 6], |_, a| a.reshape(&[3, 4])))),
        ("sum_axis", Box::new(|r| fd1(r, &[2, 3, 4], |_, a| a.sum(1)))),
        ("mean_axis", Box::new(|r| fd1(r, &[2, 3, 4], |_, a| a.mean(2)))),
        ("concat", Box::new(|r| fd2(r, &[2, 3], &[2, 2], |t, a, b| t.concat(&[a, b, a], 1)))),
        ("gather", Box::new(|r| fd1(r, &[4, 3], |_, a| a.gather(0, &[3, 1, 3])))),
        ("l2_norm", Box::new(|r| fd1(r, &[3, 4], |_, a| a.l2_norm(1)))),
        ("normalize", Box::new(|r| fd1(r, &[3, 4], |_, a| a.normalize(1)))),
        ("softmax_axis0", Box::new(|r| fd1(r, &[4, 3], |_, a| a.softmax(0)))),
        (
            "masked_softmax",
            Box::new(|r| {
                fd1(r, &[2, 4], |_, a| {
                    a.masked_softmax(1, Some(&[true, false, true, true, false, false, true, true]))
                })
            }),
        ),
        ("log_softmax", Box::new(|r| fd1(r, &[3, 5], |_, a| a.log_softmax(1)))),
        ("matmul", Box::new(|r| fd2(r, &[3, 4], &[4, 2], |_, a, b| a.matmul(b)))),
        ("matmul_batched", Box::new(|r| fd2(r, &[2, 3, 4], &[2, 4, 2], |_, a, b| a.matmul(b)))),
        (
            "layer_norm",
            Box::new(|r| {
                fd1(r, &[2, 6], |t, a| {
                    let g = t.constant(Tensor::vector(&[1.0, 0.5, -0.3, 2.0, 1.1, 0.9]));
                    let b = t.constant(Tensor::zeros(&[6]));
                    a.layer_norm(g, b, 1e-5)
                })
            }),
        ),
    ]
}

/// Every tape op against central differences, worst case over `seeds` random
/// inputs per op.
pub fn op_suite(seeds: u64) -> Result<Vec<UnitCheck>, DiffError> {
    op_cases()
        .into_iter()
        .map(|(name, case)| {
            let mut worst = 0.0_f64;
            for seed in 0..seeds {
                worst = worst.max(case(&mut ChaCha8Rng::seed_from_u64(seed))?);
            }
            Ok(UnitCheck {
                name: name.to_string(),
                worst,
                threshold: OP_THRESHOLD,
            })
        })
        .collect()
}

fn unit(name: &str, worst: f64) -> UnitCheck {
    UnitCheck {
        name: name.to_string(),
        worst,
        threshold: BLOCK_THRESHOLD,
    }
}

fn recon_diff(e: ReconError) -> DiffError {
    match e {
        ReconError::Diff(d) => d,
        other => DiffError::Shape {
            op: "recon",
            detail: other.to_string(),
        },
    }
}

/// Composite blocks: SE block, ray MLP, reconstruction branch with its
/// confidence-weighted loss, and the grounding InfoNCE.
pub fn block_suite(seed: u64) -> Result<Vec<UnitCheck>, DiffError> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, heads) = (8, 2);

    let mut store = ParamStore::new();
    let blk = SeBlock::new(&mut store, "se0", dim, heads, &mut rng);
    let x = random_tokens(&mut rng, 1, 2, 3, dim);
    let valid = [true, true, false, true, true, true];
    let err = finite_diff_check(
        |tape, xv| {
            let p = store.bind(tape);
            probe(tape, se_block(&p, &blk, xv, &valid)?)
        },
        &x,
        1e-5,
    )?;
    out.push(unit("se_block.input", err));
    let ids: Vec<ParamId> = (0..store.len()).map(ParamId).collect();
    let err = finite_diff_check_params(&mut store, &ids, 6, 1e-5, |p| {
        probe(p.tape(), se_block(p, &blk, p.tape().constant(x.clone()), &valid)?)
    })?;
    out.push(unit("se_block.params", err));

    let pe = PosEncConfig {
        dim,
        num_freqs: 2,
        coord_scale: 3.0,
        pool_kernel: 2,
        ray_mlp_hidden: 4,
    };
    let mut store = ParamStore::new();
    let mlp = RayMlp::new(&mut store, "psi", &pe, &mut rng);
    let rays = Tensor::randn(&mut rng, &[5, 3], 1.0);
    let keep = [true, true, false, true, true];
    let err = finite_diff_check(
        |tape, r| {
            let p = store.bind(tape);
            probe(tape, ray_mlp_encode(&p, &mlp, r, &keep)?)
        },
        &rays,
        1e-6,
    )?;
    out.push(unit("ray_mlp.input", err));
    let ids: Vec<ParamId> = (0..store.len()).map(ParamId).collect();
    let err = finite_diff_check_params(&mut store, &ids, 16, 1e-6, |p| {
        probe(p.tape(), ray_mlp_encode(p, &mlp, p.tape().constant(rays.clone()), &keep)?)
    })?;
    out.push(unit("ray_mlp.params", err));

    let mut store = ParamStore::new();
    let branch = ReconBranch::new(&mut store, "recon", dim, heads, &ReconConfig::default(), &mut rng);
    let feats = random_tokens(&mut rng, 1, 2, 3, dim);
    let gt = Tensor::randn(&mut rng, &[1, 2, 3, 3], 1.0);
    let ids: Vec<ParamId> = (0..store.len()).map(ParamId).collect();
    let err = finite_diff_check_params(&mut store, &ids, 6, 1e-5, |p| {
        let pred = branch.forward(p, p.tape().constant(feats.clone()), &valid)?;
        conf_weighted_loss(
            pred.global_points,
            pred.global_conf,
            &gt,
            &valid,
            0.2,
            RegSign::Reward,
            NormScope::AllViews,
        )
        .map_err(recon_diff)
    })?;
    out.push(unit("recon_branch.params", err));

    let h = Tensor::randn(&mut rng, &[dim], 1.0);
    let objects = Tensor::randn(&mut rng, &[4, dim], 1.0);
    let err = finite_diff_check_many(
        |_, xs| {
            infonce_ground(xs[0], xs[1], 2, 0.3).map_err(|e| DiffError::Shape {
                op: "infonce",
                detail: e.to_string(),
            })
        },
        &[h, objects],
        1e-6,
    )?;
    out.push(unit("infonce_ground", err));
    Ok(out)
}

/// Smallest configuration that still runs every component: 2 views of
/// 16x16 pixels, 4 px patches, dim 8.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        patch_size: 4,
        heads: 2,
        se_blocks: 1,
        fusion_blocks: 1,
        posenc: PosEncConfig {
            dim: 8,
            num_freqs: 1,
            coord_scale: 3.0,
            pool_kernel: 2,
            ray_mlp_hidden: 4,
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 3e-3,
            ..Default::default()
        },
        seed: 3,
        ..Default::default()
    }
}

pub fn micro_gen() -> GenConfig {
    GenConfig {
        rig: RigConfig {
            num_views: 2,
            width: 16,
            height: 16,
            focal: 9.0,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// End-to-end parameter gradients of the training objective on a micro
/// episode reduced to the target and one distractor.
pub fn model_suite(seed: u64) -> Result<UnitCheck, ModelError> {
    let cfg = ModelConfig { seed, ..micro_config() };
    let ep = make_episode(5, 4, &micro_gen()).map_err(|e| ModelError::Config(e.to_string()))?.0;
    let mut prep = prepare_episode(&ep, &cfg, ProposalSetting::GroundTruth).map_err(|e| ModelError::Config(e.to_string()))?;
    let keep = [prep.target_index, (prep.target_index + 1) % prep.num_proposals()];
    prep.proposal_ids = keep.iter().map(|&i| prep.proposal_ids[i]).collect();
    prep.proposal_boxes = keep.iter().map(|&i| prep.proposal_boxes[i]).collect();
    prep.proposal_categories = keep.iter().map(|&i| prep.proposal_categories[i]).collect();
    prep.coverage = keep.iter().map(|&i| prep.coverage[i].clone()).collect();
    prep.target_index = 0;
    let mut model = ToyGrounder::new(cfg, Mode::Train)?;
    // parameter layout donor for the closure; values come from `model.store`
    let shadow = ToyGrounder::new(model.config.clone(), Mode::Train)?;
    let ids: Vec<ParamId> = (0..model.store.len()).map(ParamId).collect();
    let lift = |e: ModelError| match e {
        ModelError::Diff(d) => d,
        other => DiffError::Shape {
            op: "model",
            detail: other.to_string(),
        },
    };
    let worst = finite_diff_check_params(&mut model.store, &ids, 3, 1e-5, |p| {
        let out = forward(p, &shadow, &prep, Mode::Train).map_err(lift)?;
        Ok(episode_loss(&shadow, &prep, &out).map_err(lift)?.total)
    })?;
    Ok(UnitCheck {
        name: "model.end_to_end".to_string(),
        worst,
        threshold: MODEL_THRESHOLD,
    })
}
