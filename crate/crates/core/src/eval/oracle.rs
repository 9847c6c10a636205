// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training from scratch with a content-addressed checkpoint cache.

use std::path::Path;
use std::time::{Duration, Instant};

use crate::error::Result;
use crate::interactions::{hex_digest, DatasetSplit, PromptSample};
use crate::model::{load_checkpoint, save_checkpoint, train, ModelConfig, ModelState, TrainConfig, TrainReport};

#[derive(Debug, Clone)]
pub struct OracleRun {
    pub model: ModelState,
    pub report: TrainReport,
    /// Loaded from the cache; `report` is then empty.
    pub cached: bool,
    pub wall: Duration,
    pub key: String,
}

/// Digest of everything that determines a training run's result.
pub fn oracle_key(model: &ModelConfig, train: &TrainConfig, samples: &[PromptSample]) -> String {
    let mut bytes = serde_json::to_vec(&(model, train)).expect("configs serialize");
    for s in samples {
        bytes.extend_from_slice(&(s.tokens.len() as u32).to_le_bytes());
        for t in &s.tokens {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        bytes.push(s.answer.label());
    }
    hex_digest(&bytes)
}

/// Fresh init from `model` and training on `samples`, reusing
/// `cache_dir/model-{key}.ckpt` when present.
pub fn train_cached(
    model: &ModelConfig,
    train_config: &TrainConfig,
    samples: &[PromptSample],
    val: &[PromptSample],
    cache_dir: Option<&Path>,
) -> Result<OracleRun> {
    let started = Instant::now();
    let key = oracle_key(model, train_config, samples);
    let path = cache_dir.map(|d| d.join(format!("model-{}.ckpt", &key[..16])));
    if let Some(p) = path.as_deref().filter(|p| p.exists()) {
        match load_checkpoint(p) {
            Ok(m) if m.config() == model => {
                log::info!("reusing cached model {}", p.display());
                return Ok(OracleRun { model: m, report: TrainReport::default(), cached: true, wall: started.elapsed(), key });
            }
            Ok(_) => log::warn!("cached model {} has a different config; retraining", p.display()),
            Err(e) => log::warn!("ignoring unreadable cached model {}: {e}", p.display()),
        }
    }
    let init = ModelState::init(model.clone())?;
    let (trained, report) = train(&init, samples, val, train_config)?;
    if let Some(p) = &path {
        std::fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
        save_checkpoint(&trained, p)?;
    }
    Ok(OracleRun { model: trained, report, cached: false, wall: started.elapsed(), key })
}

/// M_θ*: the original recipe (same config and seed) on the retained data only.
pub fn retrain_oracle(
    model: &ModelConfig,
    train_config: &TrainConfig,
    split: &DatasetSplit,
    cache_dir: Option<&Path>,
) -> Result<OracleRun> {
    train_cached(model, train_config, &split.retained_training_set(), &split.val, cache_dir)
}
