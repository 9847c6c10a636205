// SPDX-License-Identifier: MIT OR Apache-2.0

//! Train/val/test splits and forget-set selection.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Answer, EdgeId, InteractionGraph, ItemId, PromptRenderer, PromptSample, UserId};
use crate::error::{Error, Result};

/// How forget requests are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeletionMode {
    /// Individual interactions, sampled uniformly.
    Interaction,
    /// Every training interaction of the selected users.
    User,
    /// Every training interaction of the selected items.
    Item,
}

impl std::str::FromStr for DeletionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interaction" => Ok(Self::Interaction),
            "user" => Ok(Self::User),
            "item" => Ok(Self::Item),
            other => Err(Error::Config(format!("unknown deletion mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub forget_fraction: f64,
    pub mode: DeletionMode,
    pub seed: u64,
    /// Sampled "No" prompts per positive training interaction.
    pub negatives_per_positive: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratios: [0.7, 0.2, 0.1], forget_fraction: 0.2, mode: DeletionMode::Interaction, seed: 1, negatives_per_positive: 1 }
    }
}

/// Replayable description of a split, written next to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub mode: DeletionMode,
    pub forget_fraction: f64,
    pub ratios: [f64; 3],
    /// Training interactions whose positives form prompt histories, including
    /// ones dropped from `train` for lack of other history.
    pub history: Vec<EdgeId>,
    pub train: Vec<EdgeId>,
    pub val: Vec<EdgeId>,
    pub test: Vec<EdgeId>,
    pub forget: Vec<EdgeId>,
    pub retain_pool: Vec<EdgeId>,
    /// (user, item, source edge) per sampled negative.
    pub negatives: Vec<(UserId, ItemId, EdgeId)>,
}

/// Rendered samples for every split. `forget` and `retain_pool` index into `train`.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<PromptSample>,
    pub val: Vec<PromptSample>,
    pub test: Vec<PromptSample>,
    pub forget: Vec<usize>,
    pub retain_pool: Vec<usize>,
    /// Sampled negatives, each tied to the positive training edge it was drawn for.
    pub negatives: Vec<PromptSample>,
    pub manifest: SplitManifest,
}

impl DatasetSplit {
    /// Splits `graph`, renders every sample and selects the forget set.
    ///
    /// A prompt's history holds the user's positive training interactions
    /// strictly older than the interaction itself, so training, validation and
    /// test prompts are built the same way and no label leaks into a prompt.
    /// Interactions without such history cannot be rendered and are dropped
    /// before the forget set is drawn. Each negative reuses the history of the
    /// positive it was drawn for.
    pub fn split(graph: &InteractionGraph, renderer: &PromptRenderer, config: &SplitConfig) -> Result<Self> {
        let ratio_sum: f64 = config.ratios.iter().sum();
        if (ratio_sum - 1.0).abs() > 1e-9 || config.ratios.iter().any(|&r| r < 0.0) {
            return Err(Error::Config(format!("split ratios must be non-negative and sum to 1, got {:?}", config.ratios)));
        }
        if !(config.forget_fraction > 0.0 && config.forget_fraction < 1.0) {
            return Err(Error::Config(format!("forget_fraction must lie in (0, 1), got {}", config.forget_fraction)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<EdgeId> = (0..graph.edges().len()).collect();
        order.shuffle(&mut rng);
        let n = order.len();
        let n_train = (config.ratios[0] * n as f64).round() as usize;
        let n_val = ((config.ratios[1] * n as f64).round() as usize).min(n - n_train);
        let train_all = &order[..n_train];
        let val_all = &order[n_train..n_train + n_val];
        let test_all = &order[n_train + n_val..];

        let history_graph = graph.subgraph(train_all);
        let renderable = |e: &EdgeId| {
            let edge = graph.edges()[*e];
            history_graph.positive_history_before(edge.user, edge.timestamp).iter().any(|&i| i != edge.item)
        };
        let train: Vec<EdgeId> = train_all.iter().copied().filter(renderable).collect();
        let val: Vec<EdgeId> = val_all.iter().copied().filter(renderable).collect();
        let test: Vec<EdgeId> = test_all.iter().copied().filter(renderable).collect();
        let dropped = n - train.len() - val.len() - test.len();
        if dropped > 0 {
            log::debug!("dropped {dropped} interactions without renderable history");
        }
        if train.is_empty() {
            return Err(Error::Split("no renderable training interactions".into()));
        }

        let forget = select_forget(graph, &train, config, &mut rng)?;
        let forget_set: HashSet<EdgeId> = forget.iter().copied().collect();
        let retain_pool: Vec<EdgeId> = train.iter().copied().filter(|e| !forget_set.contains(e)).collect();
        if retain_pool.is_empty() {
            return Err(Error::Split("forget set covers the whole training set; retain pool is empty".into()));
        }

        let mut neg_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut negatives = Vec::new();
        for &e in &train {
            let edge = graph.edges()[e];
            if edge.label != 1 {
                continue;
            }
            for _ in 0..config.negatives_per_positive {
                if let Some(item) = sample_negative(graph, edge.user, &mut neg_rng) {
                    negatives.push((edge.user, item, e));
                }
            }
        }

        let manifest = SplitManifest {
            seed: config.seed,
            mode: config.mode,
            forget_fraction: config.forget_fraction,
            ratios: config.ratios,
            history: train_all.to_vec(),
            train,
            val,
            test,
            forget,
            retain_pool,
            negatives,
        };
        Self::from_manifest(graph, renderer, manifest)
    }

    /// Re-renders a split from its manifest.
    pub fn from_manifest(graph: &InteractionGraph, renderer: &PromptRenderer, manifest: SplitManifest) -> Result<Self> {
        let history_graph = graph.subgraph(&manifest.history);
        let render_edge = |e: EdgeId| -> Result<PromptSample> {
            let edge = graph.edges().get(e).ok_or_else(|| Error::Split(format!("manifest edge {e} not in graph")))?;
            let mut s =
                renderer.render_before(&history_graph, edge.user, edge.item, Answer::from_label(edge.label), edge.timestamp)?;
            s.edge = Some(e);
            Ok(s)
        };
        let render_all = |ids: &[EdgeId]| ids.iter().map(|&e| render_edge(e)).collect::<Result<Vec<_>>>();
        let train = render_all(&manifest.train)?;
        let val = render_all(&manifest.val)?;
        let test = render_all(&manifest.test)?;
        let position: std::collections::HashMap<EdgeId, usize> =
            manifest.train.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let index_of = |ids: &[EdgeId]| {
            ids.iter()
                .map(|e| position.get(e).copied().ok_or_else(|| Error::Split(format!("edge {e} is not a training edge"))))
                .collect::<Result<Vec<_>>>()
        };
        let forget = index_of(&manifest.forget)?;
        let retain_pool = index_of(&manifest.retain_pool)?;
        let negatives = manifest
            .negatives
            .iter()
            .map(|&(user, item, src)| {
                let cutoff = graph.edges().get(src).map(|e| e.timestamp).unwrap_or(i64::MAX);
                renderer.render_before(&history_graph, user, item, Answer::No, cutoff)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { train, val, test, forget, retain_pool, negatives, manifest })
    }

    pub fn forget_samples(&self) -> Vec<&PromptSample> {
        self.forget.iter().map(|&i| &self.train[i]).collect()
    }

    pub fn retain_samples(&self) -> Vec<&PromptSample> {
        self.retain_pool.iter().map(|&i| &self.train[i]).collect()
    }

    /// Samples used to fit the original model: all training interactions plus negatives.
    pub fn full_training_set(&self) -> Vec<PromptSample> {
        self.train.iter().chain(&self.negatives).cloned().collect()
    }

    /// Samples used by the retrain oracle: the same list with forgotten
    /// interactions (and negatives drawn for them) removed, order preserved.
    pub fn retained_training_set(&self) -> Vec<PromptSample> {
        let forgotten: HashSet<EdgeId> = self.forget.iter().filter_map(|&i| self.train[i].edge).collect();
        let keep_train = self.train.iter().filter(|s| s.edge.is_none_or(|e| !forgotten.contains(&e)));
        let keep_neg = self
            .negatives
            .iter()
            .zip(&self.manifest.negatives)
            .filter(|(_, &(_, _, src))| !forgotten.contains(&src))
            .map(|(s, _)| s);
        keep_train.chain(keep_neg).cloned().collect()
    }
}

fn select_forget(
    graph: &InteractionGraph,
    train: &[EdgeId],
    config: &SplitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EdgeId>> {
    let target = (config.forget_fraction * train.len() as f64).round() as usize;
    let forget = match config.mode {
        DeletionMode::Interaction => {
            let mut pool = train.to_vec();
            pool.shuffle(rng);
            pool.truncate(target);
            pool.sort_unstable();
            pool
        }
        DeletionMode::User | DeletionMode::Item => {
            let key = |e: EdgeId| {
                let edge = graph.edges()[e];
                if config.mode == DeletionMode::User {
                    edge.user
                } else {
                    edge.item
                }
            };
            let mut entities: Vec<u32> = train.iter().map(|&e| key(e)).collect();
            entities.sort_unstable();
            entities.dedup();
            entities.shuffle(rng);
            let mut chosen = HashSet::new();
            let mut count = 0;
            for entity in entities {
                if count >= target {
                    break;
                }
                chosen.insert(entity);
                count += train.iter().filter(|&&e| key(e) == entity).count();
            }
            let mut out: Vec<EdgeId> = train.iter().copied().filter(|&e| chosen.contains(&key(e))).collect();
            out.sort_unstable();
            out
        }
    };
    if forget.is_empty() {
        return Err(Error::Split("forget set is empty after selection".into()));
    }
    Ok(forget)
}

fn sample_negative(graph: &InteractionGraph, user: UserId, rng: &mut ChaCha8Rng) -> Option<ItemId> {
    let interacted: HashSet<ItemId> = graph.user_edges(user).iter().map(|&e| graph.edges()[e].item).collect();
    if interacted.len() >= graph.num_items() {
        return None;
    }
    loop {
        let item = rng.gen_range(0..graph.num_items()) as ItemId;
        if !interacted.contains(&item) {
            return Some(item);
        }
    }
}
