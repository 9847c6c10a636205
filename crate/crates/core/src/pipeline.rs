// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end stages over a [`RunConfig`]: data, training, circuits,
//! unlearning, and evaluation.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{aggregate, score_intervention, score_patching, EdgeScoreMap, Method};
use crate::circuits::{budget_from_fraction, greedy_extract, partition, Circuit, ParameterPartition};
use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{auc_acc_logloss, jsd_forget, retrain_oracle, train_cached, MetricsReport, OracleRun};
use crate::interactions::{
    ingest_tsv, synthesize, DatasetSplit, EdgeId, InteractionGraph, PromptRenderer, PromptSample, SplitManifest,
    TsvOptions,
};
use crate::model::{ModelConfig, ModelState};
use crate::ppr::{build_corrupt_sample, select_retain_buffer, CorruptCandidate, ItemPprCache, PprGraph};
use crate::unlearn::{baseline_gradient_ascent, baseline_uniform, run_unlearning, UnlearnMethod, UnlearnOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircuitSet {
    Forget,
    Retain,
}

impl std::str::FromStr for CircuitSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forget" => Ok(Self::Forget),
            "retain" => Ok(Self::Retain),
            other => Err(Error::Config(format!("unknown circuit set {other:?} (expected forget or retain)"))),
        }
    }
}

/// Data, renderer, and split for one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub graph: InteractionGraph,
    pub renderer: PromptRenderer,
    pub split: DatasetSplit,
    /// `config.model` with vocabulary and sequence length filled in.
    pub model_config: ModelConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptStats {
    pub attempted: usize,
    pub failed: usize,
    pub max_evaluated: usize,
    pub mean_evaluated: f64,
    /// Mean Δ drop from the original to the chosen corrupt prompt.
    pub mean_delta_drop: f64,
    /// Share of replacements whose item cluster differs from the replaced one.
    pub cluster_mismatch: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CircuitRun {
    pub set: CircuitSet,
    pub scores: EdgeScoreMap,
    pub circuit: Circuit,
    pub corrupt: Option<CorruptStats>,
}

pub fn load_graph(config: &RunConfig) -> Result<InteractionGraph> {
    match config.data.source {
        DataSource::Synth => synthesize(&config.data.synth),
        DataSource::Tsv => {
            let path = config.data.path.as_ref().ok_or_else(|| Error::Config("data.path is required".into()))?;
            let opts = TsvOptions { rating_threshold: config.data.rating_threshold, has_header: config.data.has_header };
            ingest_tsv(path, &opts)
        }
    }
}

impl Prepared {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let graph = load_graph(config)?;
        let renderer = PromptRenderer::new(&graph, config.template.clone())?;
        let split = DatasetSplit::split(&graph, &renderer, &config.split)?;
        Self::assemble(config, graph, renderer, split)
    }

    /// Rebuilds the split recorded in `manifest` instead of drawing a new one.
    pub fn with_manifest(config: &RunConfig, manifest: SplitManifest) -> Result<Self> {
        config.validate()?;
        let graph = load_graph(config)?;
        let renderer = PromptRenderer::new(&graph, config.template.clone())?;
        let split = DatasetSplit::from_manifest(&graph, &renderer, manifest)?;
        Self::assemble(config, graph, renderer, split)
    }

    fn assemble(config: &RunConfig, graph: InteractionGraph, renderer: PromptRenderer, split: DatasetSplit) -> Result<Self> {
        let mut model_config = config.model.clone();
        model_config.vocab_size = renderer.vocab_size();
        model_config.max_seq_len = model_config.max_seq_len.max(renderer.max_prompt_len());
        model_config.validate()?;
        Ok(Self { config: config.clone(), graph, renderer, split, model_config })
    }

    pub fn train_original(&self, cache_dir: Option<&Path>) -> Result<OracleRun> {
        train_cached(&self.model_config, &self.config.train, &self.split.full_training_set(), &self.split.val, cache_dir)
    }

    pub fn oracle(&self, cache_dir: Option<&Path>) -> Result<OracleRun> {
        retrain_oracle(&self.model_config, &self.config.train, &self.split, cache_dir)
    }

    /// User–item graph over positive training interactions.
    pub fn ppr_graph(&self) -> PprGraph {
        let edges: Vec<EdgeId> =
            self.split.manifest.train.iter().copied().filter(|&e| self.graph.edges()[e].label == 1).collect();
        PprGraph::from_interactions(&self.graph, &edges)
    }

    pub fn forget_samples(&self) -> Vec<&PromptSample> {
        self.split.forget_samples()
    }

    /// The k·|forget| retain-pool interactions nearest the forget set under
    /// PPR, followed by the negatives drawn for them.
    pub fn retain_buffer(&self) -> Result<Vec<&PromptSample>> {
        let pair = |s: &PromptSample| (s.user, s.target);
        let forget: Vec<_> = self.split.forget_samples().into_iter().map(pair).collect();
        let pool = self.split.retain_samples();
        let pool_pairs: Vec<_> = pool.iter().map(|s| pair(s)).collect();
        let chosen =
            select_retain_buffer(&self.ppr_graph(), &forget, &pool_pairs, self.config.unlearn.retain_k, &self.config.ppr)?;
        let mut out: Vec<&PromptSample> = chosen.iter().map(|&i| pool[i]).collect();
        let edges: HashSet<EdgeId> = out.iter().filter_map(|s| s.edge).collect();
        out.extend(
            self.split
                .negatives
                .iter()
                .zip(&self.split.manifest.negatives)
                .filter(|(_, &(_, _, src))| edges.contains(&src))
                .map(|(s, _)| s),
        );
        Ok(out)
    }

    pub fn circuit_samples(&self, set: CircuitSet) -> Result<Vec<&PromptSample>> {
        let mut v = match set {
            CircuitSet::Forget => self.forget_samples(),
            CircuitSet::Retain => self.retain_buffer()?,
        };
        if self.config.attribution.max_samples > 0 {
            v.truncate(self.config.attribution.max_samples);
        }
        Ok(v)
    }

    /// Corrupt prompts for `samples`; failed constructions are `None`.
    pub fn corrupt_samples(
        &self,
        state: &ModelState,
        samples: &[&PromptSample],
        cache_path: Option<&Path>,
    ) -> Result<(Vec<Option<CorruptCandidate>>, CorruptStats)> {
        let graph = self.ppr_graph();
        let cache = match cache_path {
            Some(p) => ItemPprCache::load_or_compute(p, &graph, &self.config.ppr)?,
            None => ItemPprCache::compute(&graph, &self.config.ppr)?,
        };
        let cfg = crate::ppr::CorruptConfig { tau: self.config.ppr.tau, ..self.config.corrupt };
        let out: Vec<Option<CorruptCandidate>> = samples
            .par_iter()
            .map(|s| match build_corrupt_sample(state, &self.renderer, &graph, &cache, s, &cfg) {
                Ok(c) => Some(c),
                Err(e) => {
                    log::debug!("no corrupt prompt for user {} item {}: {e}", s.user, s.target);
                    None
                }
            })
            .collect();
        let ok: Vec<&CorruptCandidate> = out.iter().flatten().collect();
        let items = self.graph.items();
        let mismatched: Vec<bool> = ok
            .iter()
            .filter_map(|c| match (items[c.replaced as usize].cluster, items[c.replacement as usize].cluster) {
                (Some(a), Some(b)) => Some(a != b),
                _ => None,
            })
            .collect();
        let n = ok.len().max(1) as f64;
        let stats = CorruptStats {
            attempted: samples.len(),
            failed: samples.len() - ok.len(),
            max_evaluated: ok.iter().map(|c| c.evaluated).max().unwrap_or(0),
            mean_evaluated: ok.iter().map(|c| c.evaluated as f64).sum::<f64>() / n,
            mean_delta_drop: ok.iter().map(|c| c.original_delta - c.delta).sum::<f64>() / n,
            cluster_mismatch: (!mismatched.is_empty())
                .then(|| mismatched.iter().filter(|&&m| m).count() as f64 / mismatched.len() as f64),
        };
        Ok((out, stats))
    }

    /// Scores the named set with the configured method and extracts its circuit.
    pub fn circuit(&self, state: &ModelState, set: CircuitSet, ppr_cache: Option<&Path>) -> Result<CircuitRun> {
        let cfg = &self.config.attribution;
        let samples = self.circuit_samples(set)?;
        if samples.is_empty() {
            return Err(Error::Attribution(format!("{set:?} set is empty")));
        }
        let (maps, corrupt): (Vec<EdgeScoreMap>, Option<CorruptStats>) = match cfg.method {
            Method::Intervention => {
                (samples.par_iter().map(|s| score_intervention(state, s)).collect::<Result<_>>()?, None)
            }
            Method::Patching => {
                let (cands, stats) = self.corrupt_samples(state, &samples, ppr_cache)?;
                let share = stats.failed as f64 / stats.attempted as f64;
                log::info!(
                    "corrupt prompts for {set:?}: {} of {} built, at most {} candidates each (mean {:.1}), cluster mismatch {:?}",
                    stats.attempted - stats.failed,
                    stats.attempted,
                    stats.max_evaluated,
                    stats.mean_evaluated,
                    stats.cluster_mismatch
                );
                if share > cfg.max_corrupt_failure {
                    return Err(Error::Attribution(format!(
                        "corrupt-prompt construction failed for {} of {} samples",
                        stats.failed, stats.attempted
                    )));
                }
                let pairs: Vec<(&PromptSample, &CorruptCandidate)> =
                    samples.iter().zip(&cands).filter_map(|(s, c)| c.as_ref().map(|c| (*s, c))).collect();
                (pairs.par_iter().map(|(s, c)| score_patching(state, s, &c.sample)).collect::<Result<_>>()?, Some(stats))
            }
        };
        let dag = state.dag();
        let budget = budget_from_fraction(dag.num_edges(), cfg.circuit_fraction)?;
        let scores = aggregate(&maps, cfg.aggregation)?;
        let circuit = if cfg.per_sample_union {
            let per: Vec<Circuit> = maps.iter().map(|m| greedy_extract(dag, m, budget)).collect::<Result<_>>()?;
            Circuit::union(&per)?
        } else {
            greedy_extract(dag, &scores, budget)?
        };
        Ok(CircuitRun { set, scores, circuit, corrupt })
    }

    pub fn partition(&self, state: &ModelState, forget: &Circuit, retain: &Circuit) -> ParameterPartition {
        partition(state.dag(), forget, retain)
    }

    /// Runs the configured unlearning method (or `method` when given).
    pub fn unlearn(
        &self,
        original: &ModelState,
        partition: &ParameterPartition,
        method: Option<UnlearnMethod>,
    ) -> Result<UnlearnOutcome> {
        let forget = self.forget_samples();
        let retain = self.retain_buffer()?;
        let cfg = crate::unlearn::UnlearnConfig { method: method.unwrap_or(self.config.unlearn.method), ..self.config.unlearn.clone() };
        match cfg.method {
            UnlearnMethod::Cure => run_unlearning(original, partition, &forget, &retain, &cfg),
            UnlearnMethod::Uniform => baseline_uniform(original, partition, &forget, &retain, &cfg),
            UnlearnMethod::GradientAscent => baseline_gradient_ascent(original, partition, &forget, &retain, &cfg),
        }
    }

    /// Test utility, forget-set JSD to `oracle`, and unlearning telemetry.
    pub fn metrics(
        &self,
        label: &str,
        model: &ModelState,
        oracle: &ModelState,
        outcome: Option<&UnlearnOutcome>,
    ) -> Result<MetricsReport> {
        let u = auc_acc_logloss(model, &self.split.test)?;
        let jsd = jsd_forget(model, oracle, &self.forget_samples())?;
        Ok(MetricsReport {
            label: label.to_string(),
            auc: u.auc,
            acc: u.acc,
            logloss: u.logloss,
            jsd_forget: jsd,
            unlearn_wall_seconds: outcome.map(|o| o.wall.as_secs_f64()).unwrap_or(0.0),
            conflict_rate: outcome.map(|o| o.trace.conflict_rate()).unwrap_or(0.0),
            config: serde_json::to_value(&self.config)?,
        })
    }
}
