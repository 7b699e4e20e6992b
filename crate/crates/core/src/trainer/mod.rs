//! Soft-triplet metric learning for the composers.
//!
//! Each step composes the batch's queries, projects positive and negative
//! targets through the shared image projection, averages the soft triplet
//! loss and applies one optimizer update with a linearly decaying learning
//! rate.

mod data;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod sampling;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composers::{ComposeInput, Composer};
use crate::error::{Error, Result};
pub use data::{substitute_index, TrainExample, TrainingSet};
pub use gradcheck::{grad_check, Fixture, GradCheckReport, GroupError};
pub use loss::{soft_triplet_loss, softplus, TripletLoss};
pub use optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Uniform over the whole training corpus.
    Corpus,
    /// Other positives of the same batch.
    InBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Initial learning rate; decays linearly to zero over all steps.
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub negatives: NegativeMode,
    pub negatives_per_positive: usize,
    pub rng_seed: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 100,
            lr: 1e-3,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            negatives: NegativeMode::Corpus,
            negatives_per_positive: 1,
            rng_seed: 0,
        }
    }

    /// Low learning rate and long schedule for full-size data.
    pub fn full() -> Self {
        TrainConfig {
            lr: 1e-5,
            epochs: 300,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.negatives_per_positive == 0 {
            return bad("need at least one negative per positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be finite and non-negative");
        }
        Ok(())
    }

    /// Learning rate at 0-based step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lr;
        }
        self.lr * (1.0 - step as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Value returned by the epoch hook, typically a validation metric.
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss,lr\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{:.10},{:.6e}\n", s.epoch, s.step, s.loss, s.lr));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// One query with its positive and negatives, all as raw image features.
#[derive(Debug, Clone, Copy)]
pub struct TripletSample<'a> {
    pub reference: &'a [f64],
    pub tokens: &'a [u32],
    pub positive: &'a [f64],
    pub negatives: &'a [&'a [f64]],
}

/// Mean soft triplet loss over every (sample, negative) triplet.
pub fn triplet_loss(composer: &Composer, samples: &[TripletSample<'_>]) -> Result<f64> {
    let losses: Vec<(f64, usize)> = samples
        .par_iter()
        .map(|s| {
            let q = composer.compose(ComposeInput {
                reference: s.reference,
                tokens: s.tokens,
            })?;
            let pos = composer.project_image(s.positive)?;
            let mut sum = 0.0;
            for neg in s.negatives {
                let neg = composer.project_image(neg)?;
                sum += soft_triplet_loss(&q, &pos, &neg)?.loss;
            }
            Ok((sum, s.negatives.len()))
        })
        .collect::<Result<_>>()?;
    let count: usize = losses.iter().map(|l| l.1).sum();
    Ok(losses.iter().map(|l| l.0).sum::<f64>() / count.max(1) as f64)
}

/// Mean loss and its exact gradient with respect to every parameter.
/// Per-sample gradients are reduced in sample order, so the result does not
/// depend on the thread count.
pub fn triplet_objective(composer: &Composer, samples: &[TripletSample<'_>]) -> Result<(f64, Vec<f64>)> {
    let count: usize = samples.iter().map(|s| s.negatives.len()).sum();
    if count == 0 {
        return Err(Error::Validation("no triplets in batch".into()));
    }
    let per_sample: Vec<(f64, Vec<f64>)> = samples
        .par_iter()
        .map(|s| {
            let mut grad = vec![0.0; composer.param_count()];
            let query = composer.compose_forward(ComposeInput {
                reference: s.reference,
                tokens: s.tokens,
            })?;
            let pos = composer.project_forward(s.positive)?;
            let mut g_query = vec![0.0; query.output.len()];
            let mut g_pos = vec![0.0; query.output.len()];
            let mut loss = 0.0;
            for neg in s.negatives {
                let neg = composer.project_forward(neg)?;
                let t = soft_triplet_loss(&query.output, &pos.unit, &neg.unit)?;
                loss += t.loss;
                add(&mut g_query, &t.g_anchor);
                add(&mut g_pos, &t.g_pos);
                composer.project_backward(&neg, &t.g_neg, &mut grad);
            }
            composer.compose_backward(&query.cache, &g_query, &mut grad)?;
            composer.project_backward(&pos, &g_pos, &mut grad);
            Ok((loss, grad))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / count as f64;
    let mut total = vec![0.0; composer.param_count()];
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        add(&mut total, g);
    }
    total.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, total))
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn train(composer: &mut Composer, data: &TrainingSet, cfg: &TrainConfig) -> Result<TrainTrace> {
    train_with(composer, data, cfg, |_, _| Ok(None))
}

/// Trains in place. `on_epoch(epoch, composer)` runs after every epoch and
/// its return value is recorded in the trace.
pub fn train_with<F>(composer: &mut Composer, data: &TrainingSet, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainTrace>
where
    F: FnMut(usize, &Composer) -> Result<Option<f64>>,
{
    cfg.validate()?;
    data.check(composer)?;
    let n = data.examples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut negative_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut optimizer = Optimizer::new(cfg.optimizer, composer.param_count(), cfg.weight_decay);
    let mut trace = TrainTrace::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cfg.lr_at(step, total_steps);
            let pairs: Vec<(usize, usize)> = batch
                .iter()
                .map(|&i| (data.examples[i].reference, data.examples[i].target))
                .collect();
            let negatives = match cfg.negatives {
                NegativeMode::Corpus => {
                    sampling::sample_negatives(&mut negative_rng, data.corpus.len(), &pairs, cfg.negatives_per_positive)?
                }
                NegativeMode::InBatch => {
                    sampling::sample_in_batch(&mut negative_rng, data.corpus.len(), &pairs, cfg.negatives_per_positive)?
                }
            };
            let neg_features: Vec<Vec<&[f64]>> = negatives
                .iter()
                .map(|ns| ns.iter().map(|&j| data.corpus[j].as_slice()).collect())
                .collect();
            let samples: Vec<TripletSample<'_>> = batch
                .iter()
                .zip(&neg_features)
                .map(|(&i, negs)| data.sample(i, negs))
                .collect();
            let (loss, grad) = triplet_objective(composer, &samples)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let (max_index, max_abs_param) = composer.params.max_abs();
                return Err(Error::NonFinite {
                    step,
                    lr,
                    max_abs_param,
                    max_index,
                });
            }
            optimizer.step(composer.params.flat_mut(), &grad, lr);
            trace.steps.push(StepRecord { epoch, step, loss, lr });
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        let mean_loss = epoch_loss / n as f64;
        let metric = on_epoch(epoch, composer)?;
        log::debug!("epoch {epoch}: loss {mean_loss:.6}");
        trace.epochs.push(EpochRecord { epoch, mean_loss, metric });
    }
    Ok(trace)
}
