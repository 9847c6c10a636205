// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mini-batch next-token training on the answer position.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ForwardRecord, ModelState};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::interactions::PromptSample;
use crate::optim::{AdamW, AdamWConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    /// Linear warmup length for [`LrSchedule::Cosine`].
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            seed: 1,
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule::Cosine,
            warmup_steps: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to zero at the last step.
    #[default]
    Cosine,
}

impl TrainConfig {
    /// Learning rate for 0-based `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let base = self.optimizer.lr;
        match self.schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                if step < self.warmup_steps {
                    return base * (step + 1) as f64 / self.warmup_steps as f64;
                }
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = (step - self.warmup_steps) as f64 / span;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
}

const CHUNK: usize = 8;
const WINDOW: usize = 64;

/// Mean loss and mean parameter gradient over `samples`.
///
/// Samples are processed in fixed chunks whose partial sums are combined in
/// order, so the result does not depend on the number of worker threads.
pub fn batch_loss_grad<F>(state: &ModelState, samples: &[&PromptSample], objective: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &ForwardRecord) -> (f64, Vec<f64>) + Sync,
{
    let n = samples.len();
    let mut total = vec![0.0; state.num_params()];
    let mut loss = 0.0;
    if n == 0 {
        return Ok((0.0, total));
    }
    for (w, window) in samples.chunks(WINDOW).enumerate() {
        let parts: Vec<Result<(f64, Vec<f64>)>> = window
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut g = vec![0.0; state.num_params()];
                let mut l = 0.0;
                for (k, s) in chunk.iter().enumerate() {
                    let idx = w * WINDOW + c * CHUNK + k;
                    l += state.loss_grad(&s.tokens, &mut g, |rec| objective(idx, rec))?;
                }
                Ok((l, g))
            })
            .collect();
        for part in parts {
            let (l, g) = part?;
            loss += l;
            for (a, b) in total.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    let inv = 1.0 / n as f64;
    total.iter_mut().for_each(|x| *x *= inv);
    Ok((loss * inv, total))
}

/// P(Yes) for every sample.
pub fn predict(state: &ModelState, samples: &[PromptSample]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| state.forward(&s.tokens, super::RecordLevel::None).map(|r| r.yes_prob()))
        .collect()
}

/// Trains a copy of `state` with AdamW on the answer-token NLL.
pub fn train(
    state: &ModelState,
    samples: &[PromptSample],
    val: &[PromptSample],
    config: &TrainConfig,
) -> Result<(ModelState, TrainReport)> {
    let mut model = state.clone();
    let mut report = TrainReport::default();
    if config.epochs == 0 || samples.is_empty() {
        return Ok((model, report));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("train.batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.optimizer.clone(), model.num_params());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let total_steps = config.epochs * samples.len().div_ceil(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&PromptSample> = batch.iter().map(|&i| &samples[i]).collect();
            let (loss, grad) = batch_loss_grad(&model, &refs, |i, rec| rec.nll(refs[i].answer))?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, step, loss });
            }
            opt.config.lr = config.lr_at(report.steps, total_steps);
            opt.step(&mut model.params, &grad);
            epoch_loss += loss * batch.len() as f64;
            report.steps += 1;
        }
        let val_auc = if val.is_empty() {
            None
        } else {
            let scores = predict(&model, val)?;
            let labels: Vec<u8> = val.iter().map(|s| s.answer.label()).collect();
            auc(&scores, &labels)
        };
        let train_loss = epoch_loss / samples.len() as f64;
        match val_auc {
            Some(a) => log::info!("epoch {epoch}: train loss {train_loss:.4}, val auc {a:.4}"),
            None => log::info!("epoch {epoch}: train loss {train_loss:.4}"),
        }
        report.epochs.push(EpochLog { epoch, train_loss, val_auc });
    }
    if let Some(name) = model.first_non_finite() {
        return Err(Error::NonFinite(format!("parameter {name} after training")));
    }
    Ok((model, report))
}
