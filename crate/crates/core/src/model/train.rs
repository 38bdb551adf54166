//! Joint training: AdamW with linear warmup and cosine decay over shuffled
//! mini-batches; per-episode gradients are summed in episode order so the
//! result does not depend on the worker count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffkit::{AdamW, DiffError, Tape, Tensor};
use crate::grounding::GroundingError;
use crate::synthscene::derive_seed;

use super::{episode_loss, forward, Mode, ModelError, PreparedEpisode, ToyGrounder};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {component} at step {step}")]
    NonFinite { step: usize, component: String },
    #[error("empty training set")]
    Empty,
    #[error("step {step}: {source}")]
    Model {
        step: usize,
        #[source]
        source: ModelError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub ground: f64,
    /// Absent when spatial guidance is off.
    pub recon: Option<f64>,
    pub lang: f64,
    pub total: f64,
}

/// Learning rate at `step` of `total`: linear warmup over the first
/// `ceil(warmup_ratio * total)` steps, then half-cosine decay to zero.
pub fn lr_schedule(base: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct EpisodeGrad {
    grads: Vec<Tensor>,
    ground: f64,
    recon: Option<f64>,
    lang: f64,
    total: f64,
}

fn episode_grad(model: &ToyGrounder, ep: &PreparedEpisode, step: usize) -> Result<EpisodeGrad, TrainError> {
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let wrap = |source: ModelError| match source {
        ModelError::Grounding(GroundingError::NonFinite { component, .. }) => TrainError::NonFinite {
            step,
            component: component.to_string(),
        },
        source => TrainError::Model { step, source },
    };
    let out = forward(&p, model, ep, Mode::Train).map_err(wrap)?;
    let loss = episode_loss(model, ep, &out).map_err(wrap)?;
    let grads = p.gradients(&tape.backward(loss.total));
    Ok(EpisodeGrad {
        grads,
        ground: loss.ground.item(),
        recon: loss.recon.map(|r| r.item()),
        lang: loss.lang.item(),
        total: loss.total.item(),
    })
}

fn batch_grads(model: &ToyGrounder, batch: &[&PreparedEpisode], step: usize, workers: usize) -> Vec<Result<EpisodeGrad, TrainError>> {
    if workers <= 1 || batch.len() <= 1 {
        return batch.iter().map(|ep| episode_grad(model, ep, step)).collect();
    }
    let mut slots: Vec<Option<Result<EpisodeGrad, TrainError>>> = (0..batch.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers.min(batch.len()))
            .map(|w| {
                s.spawn(move || {
                    (w..batch.len())
                        .step_by(workers)
                        .map(|i| (i, episode_grad(model, batch[i], step)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("training worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every episode assigned")).collect()
}

/// Trains in place. `on_step` sees every log row as it is produced.
pub fn train(model: &mut ToyGrounder, data: &[PreparedEpisode], mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let tc = model.config.train.clone();
    let per_epoch = data.len().div_ceil(tc.batch_size);
    let total = tc.epochs * per_epoch;
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, tc.weight_decay);
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(model.config.seed, 1000 + epoch as u64)));
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&PreparedEpisode> = chunk.iter().map(|&i| &data[i]).collect();
            let results = batch_grads(model, &batch, step, tc.workers);
            let scale = 1.0 / batch.len() as f64;
            let mut sum: Option<Vec<Tensor>> = None;
            let (mut ground, mut lang, mut total_loss) = (0.0, 0.0, 0.0);
            let mut recon: Option<f64> = None;
            for r in results {
                let r = r?;
                ground += r.ground * scale;
                lang += r.lang * scale;
                total_loss += r.total * scale;
                if let Some(v) = r.recon {
                    *recon.get_or_insert(0.0) += v * scale;
                }
                match &mut sum {
                    None => sum = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            let lr = lr_schedule(tc.lr, step, total, tc.warmup_ratio);
            let store = &mut model.store;
            let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
            opt.step(store.tensors_mut(), &grads, lr, &|i| names[i].clone()).map_err(|e| match e {
                DiffError::NonFinite { param, .. } => TrainError::NonFinite {
                    step,
                    component: format!("gradient of {param}"),
                },
                other => TrainError::Model {
                    step,
                    source: ModelError::Diff(other),
                },
            })?;
            let row = StepLog {
                step,
                lr,
                ground,
                recon,
                lang,
                total: total_loss,
            };
            on_step(&row);
            log.push(row);
            step += 1;
        }
    }
    Ok(log)
}
