// SPDX-License-Identifier: MIT OR Apache-2.0

//! Item importance, preference mixing, and single-item corrupt prompts.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{ItemPprCache, PprGraph, PprVector};
use crate::error::{Error, Result};
use crate::interactions::{ItemId, PromptRenderer, PromptSample};
use crate::model::{ModelState, RecordLevel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptConfig {
    /// History items considered for replacement, by importance.
    pub top_items: usize,
    /// Size of the preferred set, by PPR mass.
    pub preferred: usize,
    /// Replacement candidates taken from the low end of the preferred set.
    pub least_relevant: usize,
    pub tau: f64,
}

impl Default for CorruptConfig {
    fn default() -> Self {
        Self { top_items: 3, preferred: 50, least_relevant: 10, tau: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptCandidate {
    /// Index into the source sample's history.
    pub index: usize,
    pub replaced: ItemId,
    pub replacement: ItemId,
    pub sample: PromptSample,
    pub delta: f64,
    pub original_delta: f64,
    /// Candidate prompts evaluated.
    pub evaluated: usize,
}

/// S(i) for each history item, in history order: the summed per-token norm
/// of ∂Δ/∂embedding over the item's span.
pub fn item_importance(state: &ModelState, sample: &PromptSample) -> Result<Vec<f64>> {
    if sample.item_spans.len() < sample.history.len() {
        return Err(Error::Prompt(format!(
            "sample has {} history items but {} spans",
            sample.history.len(),
            sample.item_spans.len()
        )));
    }
    let rec = state.forward(&sample.tokens, RecordLevel::MessagesAndGrads)?;
    Ok(importance_from(state, sample, rec.embedding_grad.as_ref().expect("grads recorded")))
}

fn importance_from(state: &ModelState, sample: &PromptSample, grad: &[f64]) -> Vec<f64> {
    let d = state.config().width;
    sample
        .history_spans()
        .iter()
        .map(|span| span.range().map(|t| grad[t * d..(t + 1) * d].iter().map(|g| g * g).sum::<f64>().sqrt()).sum())
        .collect()
}

/// π_u = Σ_i softmax(τ·S)(i) · π_i over the precomputed item vectors.
pub fn combine_ppr(cache: &ItemPprCache, history: &[ItemId], importance: &[f64], tau: f64) -> Result<PprVector> {
    if history.is_empty() || history.len() != importance.len() {
        return Err(Error::Config("history and importance must be non-empty and aligned".into()));
    }
    if let Some(&i) = history.iter().find(|&&i| i as usize >= cache.vectors.len()) {
        return Err(Error::Config(format!("item {i} has no precomputed vector")));
    }
    let m = importance.iter().map(|s| tau * s).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = importance.iter().map(|s| (tau * s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
    let (mut residual, mut lost) = (0.0, 0.0);
    for (&item, w) in history.iter().zip(e.iter().map(|x| x / z)) {
        let v = cache.item(item);
        for &(k, mass) in &v.entries {
            *acc.entry(k).or_default() += w * mass;
        }
        residual += w * v.residual;
        lost += w * v.lost;
    }
    Ok(PprVector {
        entries: acc.into_iter().filter(|e| e.1 != 0.0).collect(),
        alpha: cache.config.alpha,
        epsilon: cache.config.epsilon,
        residual,
        lost,
        pushes: 0,
    })
}

/// Searches single-item replacements of the most important history items
/// with weakly related items from the user's PPR neighbourhood, returning
/// the candidate with the smallest Δ.
pub fn build_corrupt_sample(
    state: &ModelState,
    renderer: &PromptRenderer,
    graph: &PprGraph,
    cache: &ItemPprCache,
    sample: &PromptSample,
    config: &CorruptConfig,
) -> Result<CorruptCandidate> {
    if sample.history.is_empty() {
        return Err(Error::Attribution("sample has no history".into()));
    }
    let rec = state.forward(&sample.tokens, RecordLevel::MessagesAndGrads)?;
    let importance = importance_from(state, sample, rec.embedding_grad.as_ref().expect("grads recorded"));
    let pi = combine_ppr(cache, &sample.history, &importance, config.tau)?;

    let mut by_importance: Vec<usize> = (0..sample.history.len()).collect();
    by_importance.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    by_importance.truncate(config.top_items);

    let excluded: HashSet<ItemId> = sample.history.iter().copied().chain([sample.target]).collect();
    let mut ranked: Vec<(ItemId, f64)> = (0..graph.num_items() as ItemId)
        .filter(|i| !excluded.contains(i))
        .map(|i| (i, pi.get(graph.item_node(i))))
        .filter(|&(_, m)| m > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if ranked.len() < config.preferred {
        log::debug!(
            "only {} items carry PPR mass for user {}; preferred set shrinks from {}",
            ranked.len(),
            sample.user,
            config.preferred
        );
    }
    ranked.truncate(config.preferred);
    // Lowest mass first.
    ranked.reverse();
    ranked.truncate(config.least_relevant);
    if ranked.is_empty() {
        return Err(Error::Attribution(format!("no replacement candidates for user {}", sample.user)));
    }

    let mut best: Option<CorruptCandidate> = None;
    let mut evaluated = 0;
    for &idx in &by_importance {
        for &(replacement, _) in &ranked {
            let candidate = renderer.replace_history_item(sample, idx, replacement)?;
            let delta = state.forward(&candidate.tokens, RecordLevel::None)?.delta;
            evaluated += 1;
            if best.as_ref().is_none_or(|b| delta < b.delta) {
                best = Some(CorruptCandidate {
                    index: idx,
                    replaced: sample.history[idx],
                    replacement,
                    sample: candidate,
                    delta,
                    original_delta: rec.delta,
                    evaluated: 0,
                });
            }
        }
    }
    let mut best = best.expect("at least one candidate evaluated");
    best.evaluated = evaluated;
    Ok(best)
}
