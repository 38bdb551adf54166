use super::*;
use crate::diffkit::Tape;
use crate::gradsuite::{micro_config, micro_gen};
use crate::recon::decoder_calls;
use crate::synthscene::{make_episode, GroundingEpisode};

fn micro_episode(index: usize) -> GroundingEpisode {
    make_episode(5, index, &micro_gen()).unwrap().0
}

fn prepared(index: usize, cfg: &ModelConfig) -> PreparedEpisode {
    prepare_episode(&micro_episode(index), cfg, ProposalSetting::GroundTruth).unwrap()
}

#[test]
fn encoded_grid_shapes_and_world_coordinates() {
    let cfg = micro_config();
    let model = ToyGrounder::new(cfg.clone(), Mode::Infer).unwrap();
    let ep = micro_episode(0);
    let prep = prepare_episode(&ep, &cfg, ProposalSetting::GroundTruth).unwrap();
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let grid = encode_views(&p, &model, &prep).unwrap();
    assert_eq!(grid.features.shape(), vec![1, 2, (16 / 4) * (16 / 4), 8]);
    let mut want = Vec::new();
    for f in &ep.frames {
        want.extend(f.patch_mean_world(4).means.iter().flatten().copied());
    }
    assert_eq!(grid.world_coords.data(), &want[..]);
}

#[test]
fn identical_frames_give_identical_view_features() {
    let cfg = micro_config();
    let model = ToyGrounder::new(cfg.clone(), Mode::Infer).unwrap();
    let mut ep = micro_episode(1);
    ep.frames[1] = ep.frames[0].clone();
    let prep = prepare_episode(&ep, &cfg, ProposalSetting::GroundTruth).unwrap();
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let f = encode_views(&p, &model, &prep).unwrap().features.value();
    let half = f.numel() / 2;
    assert_eq!(f.data()[..half], f.data()[half..]);
}

#[test]
fn degenerate_input_is_rejected() {
    let cfg = micro_config();
    let model = ToyGrounder::new(cfg.clone(), Mode::Infer).unwrap();
    let mut ep = micro_episode(2);
    for f in &mut ep.frames {
        f.depth.fill(0.0);
    }
    let prep = prepare_episode(&ep, &cfg, ProposalSetting::GroundTruth).unwrap();
    assert!(matches!(infer(&model, &prep), Err(ModelError::Degenerate)));
}

#[test]
fn inference_never_touches_reconstruction() {
    let cfg = micro_config();
    let prep = prepared(3, &cfg);
    let trainer = ToyGrounder::new(cfg.clone(), Mode::Train).unwrap();
    assert!(trainer.has_recon() && !trainer.recon_parameters().is_empty());

    let infer_model = ToyGrounder::new(cfg.clone(), Mode::Infer).unwrap();
    assert!(!infer_model.has_recon());
    assert!(infer_model.recon_parameters().is_empty());
    assert!(infer_model.num_parameters() < trainer.num_parameters());

    // a train-mode model run in inference mode touches no recon parameter
    let before = decoder_calls();
    for model in [&trainer, &infer_model] {
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        forward(&p, model, &prep, Mode::Infer).unwrap();
        let recon = model.recon_parameters();
        assert!(p.touched().iter().all(|id| !recon.contains(id)));
    }
    assert_eq!(decoder_calls(), before);

    let tape = Tape::new();
    let p = trainer.store.bind(&tape);
    let out = forward(&p, &trainer, &prep, Mode::Train).unwrap();
    assert!(out.recon.is_some());
    assert_eq!(decoder_calls(), before + 1);
    assert!(trainer.recon_parameters().iter().all(|id| p.touched().contains(id)));
}

#[test]
fn shared_parameters_match_across_modes_and_checkpoints_load() {
    let cfg = micro_config();
    let trainer = ToyGrounder::new(cfg.clone(), Mode::Train).unwrap();
    let mut infer_model = ToyGrounder::new(cfg.clone(), Mode::Infer).unwrap();
    for (name, t) in infer_model.store.iter() {
        assert_eq!(trainer.store.by_name(name), Some(t), "{name}");
    }
    infer_model.load(&trainer.save()).unwrap();

    let mut other = ToyGrounder::new(ModelConfig { seed: 99, ..cfg.clone() }, Mode::Train).unwrap();
    other.load(&trainer.save()).unwrap();
    assert_eq!(other.store.tensors(), trainer.store.tensors());

    let wider = ModelConfig {
        dim: 12,
        posenc: PosEncConfig {
            dim: 12,
            ..cfg.posenc.clone()
        },
        ..cfg.clone()
    };
    let mut wide = ToyGrounder::new(wider, Mode::Infer).unwrap();
    assert!(matches!(wide.load(&trainer.save()), Err(ModelError::Mismatch(_))));
    // a train-mode model cannot start from an inference-only checkpoint
    let mut trainer2 = ToyGrounder::new(cfg, Mode::Train).unwrap();
    assert!(matches!(trainer2.load(&infer_model.save()), Err(ModelError::Mismatch(_))));
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let u = crate::gradsuite::model_suite(3).unwrap();
    assert!(u.passed(), "{u:?}");
}

fn permuted(prep: &PreparedEpisode, perm: &[usize]) -> PreparedEpisode {
    let mut q = prep.clone();
    q.proposal_ids = perm.iter().map(|&i| prep.proposal_ids[i]).collect();
    q.proposal_boxes = perm.iter().map(|&i| prep.proposal_boxes[i]).collect();
    q.proposal_categories = perm.iter().map(|&i| prep.proposal_categories[i]).collect();
    q.coverage = perm.iter().map(|&i| prep.coverage[i].clone()).collect();
    q.target_index = perm.iter().position(|&i| i == prep.target_index).unwrap();
    q
}

#[test]
fn proposal_permutation_is_exactly_equivariant() {
    let cfg = micro_config();
    let model = ToyGrounder::new(cfg.clone(), Mode::Infer).unwrap();
    for index in 0..4 {
        let prep = prepared(index, &cfg);
        let n = prep.num_proposals();
        let perm: Vec<usize> = (0..n).map(|i| (i * 3 + 1) % n).collect();
        let perm = if n.is_multiple_of(3) { (0..n).rev().collect() } else { perm };
        let a = infer(&model, &prep).unwrap();
        let b = infer(&model, &permuted(&prep, &perm)).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(b.similarities[j], a.similarities[i]);
        }
        assert_eq!(a.predicted_id, b.predicted_id);
        assert_eq!(a.ground_state, b.ground_state);
    }
}

#[test]
fn ground_token_is_last_and_query_matters() {
    let cfg = micro_config();
    let model = ToyGrounder::new(cfg.clone(), Mode::Infer).unwrap();
    let prep = prepared(6, &cfg);
    let a = infer(&model, &prep).unwrap();
    let mut other = prep.clone();
    other.tokens.reverse();
    let b = infer(&model, &other).unwrap();
    assert_ne!(a.ground_state, b.ground_state);
}

#[test]
fn training_is_deterministic_and_worker_count_free() {
    let cfg = micro_config();
    let data: Vec<PreparedEpisode> = (0..4).map(|i| prepared(i, &cfg)).collect();
    let run = |workers: usize| {
        let mut c = cfg.clone();
        c.train.workers = workers;
        let mut m = ToyGrounder::new(c, Mode::Train).unwrap();
        let log = train(&mut m, &data, |_| {}).unwrap();
        (m.save(), log)
    };
    let (a, la) = run(1);
    let (b, lb) = run(1);
    let (c, lc) = run(2);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(a, c);
    assert_eq!(la, lc);
    assert_eq!(la.len(), 2 * 2);
    assert!(la.iter().all(|r| r.recon.is_some()));
}

#[test]
fn ablations_shape_the_objective() {
    let cfg = micro_config();
    let data: Vec<PreparedEpisode> = (0..2).map(|i| prepared(i, &cfg)).collect();
    let no_sg = Ablation::NoSg.apply(&cfg);
    let mut m = ToyGrounder::new(no_sg, Mode::Train).unwrap();
    assert!(!m.has_recon());
    let log = train(&mut m, &data, |_| {}).unwrap();
    assert!(log.iter().all(|r| r.recon.is_none()));
    assert_eq!(Ablation::NoLg.apply(&cfg).loss.lambda_l, 0.0);
    assert!(!Ablation::NoMpe.apply(&cfg).components.position_encoding);
    assert!(!Ablation::NoAttn.apply(&cfg).components.structure_attention);
    for a in Ablation::ALL {
        assert_eq!(Ablation::parse(a.name()), Some(a));
        let m = ToyGrounder::new(a.apply(&cfg), Mode::Infer).unwrap();
        infer(&m, &data[0]).unwrap();
    }
    assert_eq!(Ablation::parse("sg"), Some(Ablation::NoSg));
}

#[test]
fn non_finite_loss_aborts_with_step_and_component() {
    let cfg = micro_config();
    let data: Vec<PreparedEpisode> = (0..2).map(|i| prepared(i, &cfg)).collect();
    let mut m = ToyGrounder::new(cfg, Mode::Train).unwrap();
    let id = (0..m.store.len())
        .map(ParamId)
        .find(|&i| m.store.name(i) == "head.category.bias")
        .unwrap();
    m.store.get_mut(id).data_mut()[0] = f64::NAN;
    match train(&mut m, &data, |_| {}) {
        Err(TrainError::NonFinite { step, component }) => {
            assert_eq!(step, 0);
            assert_eq!(component, "L_lang");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn schedule_warms_up_then_decays() {
    let total = 100;
    assert_eq!(lr_schedule(1.0, 0, total, 0.05), 0.2);
    assert_eq!(lr_schedule(1.0, 4, total, 0.05), 1.0);
    assert_eq!(lr_schedule(1.0, 5, total, 0.05), 1.0);
    assert!((lr_schedule(1.0, 5 + 95 / 2, total, 0.05) - 0.5).abs() < 0.02);
    assert!(lr_schedule(1.0, 99, total, 0.05) < 1e-3);
    let mut prev = f64::INFINITY;
    for s in 5..total {
        let lr = lr_schedule(1.0, s, total, 0.05);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn oracle_scores_perfectly_and_random_matches_chance() {
    let cfg = micro_config();
    let data: Vec<PreparedEpisode> = (0..300).map(|i| prepared(i, &cfg)).collect();
    let oracle = evaluate(&OracleGrounder, &data, &[0.25, 0.5]).unwrap();
    assert_eq!(oracle.accuracy(0.25), 1.0);
    assert_eq!(oracle.accuracy(0.5), 1.0);
    assert_eq!(oracle.category_accuracy(), 1.0);
    assert_eq!(oracle.errors[0], data.len());
    assert_eq!(oracle.unique.count + oracle.multiple.count, data.len());

    let random = evaluate(&RandomGrounder { seed: 11 }, &data, &[0.25, 0.5]).unwrap();
    let expect: f64 = data.iter().map(|e| 1.0 / e.num_proposals() as f64).sum::<f64>() / data.len() as f64;
    let var: f64 = data
        .iter()
        .map(|e| {
            let p = 1.0 / e.num_proposals() as f64;
            p * (1.0 - p)
        })
        .sum::<f64>()
        / (data.len() as f64).powi(2);
    let acc = random.accuracy(0.25);
    assert!((acc - expect).abs() <= 3.0 * var.sqrt(), "{acc} vs {expect}");
    // exact boxes: IoU is 1 or 0, so both thresholds agree with id accuracy
    let id_acc = random.predictions.iter().zip(&data).filter(|(p, e)| **p == e.target_id).count() as f64 / data.len() as f64;
    assert_eq!(random.accuracy(0.5), acc);
    assert_eq!(acc, id_acc);
}

#[test]
fn report_csv_has_pinned_header() {
    let cfg = micro_config();
    let data: Vec<PreparedEpisode> = (0..3).map(|i| prepared(i, &cfg)).collect();
    let r = evaluate(&OracleGrounder, &data, &[0.25, 0.5]).unwrap();
    let csv = r.to_csv("test");
    assert!(csv.starts_with("split,subset,metric,value\n"));
    assert!(csv.contains("test,overall,acc@0.25,1\n"));
    assert!(evaluate(&OracleGrounder, &data, &[0.0]).is_err());
}

#[test]
fn error_rules() {
    let cfg = micro_config();
    let mut prep = prepared(7, &cfg);
    assert_eq!(classify_error(&prep, prep.target_id), ErrorKind::Correct);

    // same instance, box shrunk to one tenth of the volume along x
    let t = prep.target_index;
    let b = prep.target_box;
    let mut loose = prep.clone();
    let size = b.size();
    loose.proposal_boxes[t] = crate::geometry::Aabb::from_center_size(b.center(), [size[0] * 0.1, size[1], size[2]]);
    assert!((crate::geometry::aabb_iou(&loose.proposal_boxes[t], &b) - 0.1).abs() < 1e-9);
    assert_eq!(classify_error(&loose, prep.target_id), ErrorKind::Detection);

    let other = (0..prep.num_proposals()).find(|&i| i != t).unwrap();
    prep.proposal_categories[other] = (prep.target_category + 1) % CATEGORIES.len();
    assert_eq!(classify_error(&prep, prep.proposal_ids[other]), ErrorKind::Semantic);
    prep.proposal_categories[other] = prep.target_category;
    assert_eq!(classify_error(&prep, prep.proposal_ids[other]), ErrorKind::Spatial);
    prep.tokens.clear();
    assert_eq!(classify_error(&prep, prep.target_id), ErrorKind::Other);
}

#[test]
fn jittered_proposals_keep_ids_and_move_boxes() {
    let cfg = micro_config();
    let ep = micro_episode(8);
    let setting = ProposalSetting::Jitter {
        sigma_scale: 0.1,
        sigma_center: 0.05,
        seed: 1,
    };
    let a = prepare_episode(&ep, &cfg, setting).unwrap();
    let b = prepare_episode(&ep, &cfg, setting).unwrap();
    let g = prepare_episode(&ep, &cfg, ProposalSetting::GroundTruth).unwrap();
    assert_eq!(a.proposal_ids, g.proposal_ids);
    assert_eq!(a.proposal_boxes, b.proposal_boxes);
    assert_ne!(a.proposal_boxes, g.proposal_boxes);
}

#[test]
fn config_validation() {
    let mut c = micro_config();
    c.posenc.dim = 6;
    assert!(matches!(ToyGrounder::new(c, Mode::Infer), Err(ModelError::Config(_))));
    let mut c = micro_config();
    c.heads = 3;
    assert!(ModelConfig::validate(&c).is_err());
    let mut c = micro_config();
    c.train.warmup_ratio = 1.0;
    assert!(c.validate().is_err());
}
