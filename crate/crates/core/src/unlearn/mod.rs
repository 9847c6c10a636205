// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuit-routed unlearning with shared-group conflict projection, plus the
//! uniform and gradient-ascent baselines.

pub mod theory;
mod trace;

pub use trace::{AlignmentTrace, TraceRow, TRACE_COLUMNS};

use std::ops::Range;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::circuits::{Group, ParameterPartition};
use crate::error::{Error, Result};
use crate::eval::{binary_kl, clamp_prob};
use crate::interactions::PromptSample;
use crate::model::{batch_loss_grad, ModelState, RecordLevel};
use crate::optim::{AdamW, AdamWConfig};

/// Norms below this are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnMethod {
    #[default]
    Cure,
    Uniform,
    GradientAscent,
}

impl std::str::FromStr for UnlearnMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cure" => Ok(Self::Cure),
            "uniform" => Ok(Self::Uniform),
            "gradient_ascent" | "ga" => Ok(Self::GradientAscent),
            other => Err(Error::Config(format!("unknown unlearning method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// θ ← θ − lr·d
    Sgd,
    /// d is fed to AdamW as the gradient.
    #[default]
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub method: UnlearnMethod,
    /// ω_r; ω_f = 1 − ω_r.
    pub omega_r: f64,
    pub lr: f64,
    pub steps: usize,
    /// Retain buffer size as a multiple of the forget set.
    pub retain_k: usize,
    pub forget_batch: usize,
    pub retain_batch: usize,
    /// cos ψ below this counts as a conflict.
    pub conflict_threshold: f64,
    pub normalize_shared: bool,
    pub step_rule: StepRule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Std of the seeded Gaussian jitter added to trainable parameters before
    /// the first step. KL-to-original gradients vanish at the original
    /// parameters, so without it nothing moves.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            method: UnlearnMethod::Cure,
            omega_r: 0.6,
            lr: 1e-3,
            steps: 40,
            retain_k: 6,
            forget_batch: 32,
            retain_batch: 64,
            conflict_threshold: -0.02,
            normalize_shared: true,
            step_rule: StepRule::Adamw,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            jitter: 1e-4,
            seed: 1,
        }
    }
}

impl UnlearnConfig {
    pub fn omega_f(&self) -> f64 {
        1.0 - self.omega_r
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_r > 0.0 && self.omega_r < 1.0) {
            return Err(Error::Config(format!("unlearn.omega_r must lie in (0, 1), got {}", self.omega_r)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("unlearn.lr must be positive, got {}", self.lr)));
        }
        if self.retain_k == 0 || self.forget_batch == 0 || self.retain_batch == 0 {
            return Err(Error::Config("unlearn.retain_k and batch sizes must be positive".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config("unlearn.jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Samples paired with the original model's P(Yes), computed once.
#[derive(Debug, Clone)]
pub struct Reference<'a> {
    pub samples: Vec<&'a PromptSample>,
    pub probs: Vec<f64>,
}

impl<'a> Reference<'a> {
    pub fn new(original: &ModelState, samples: Vec<&'a PromptSample>) -> Result<Self> {
        let probs = samples
            .iter()
            .map(|s| original.forward(&s.tokens, RecordLevel::None).map(|r| r.yes_prob()))
            .collect::<Result<_>>()?;
        Ok(Self { samples, probs })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Reference<'a> {
        Reference { samples: idx.iter().map(|&i| self.samples[i]).collect(), probs: idx.iter().map(|&i| self.probs[i]).collect() }
    }
}

/// sign · mean KL(P_ref ‖ P_current) and its parameter gradient.
fn kl_objective(current: &ModelState, batch: &Reference, sign: f64) -> Result<(f64, Vec<f64>)> {
    batch_loss_grad(current, &batch.samples, |i, rec| {
        let p = clamp_prob(batch.probs[i]);
        let q = clamp_prob(rec.yes_prob());
        let dkl_dq = -p / q + (1.0 - p) / (1.0 - q);
        (sign * binary_kl(p, q), rec.yes_prob_seed(sign * dkl_dq))
    })
}

/// L_F = −mean KL(P_original ‖ P_current) over the batch. Always ≤ 0.
pub fn forget_loss(current: &ModelState, batch: &Reference) -> Result<(f64, Vec<f64>)> {
    kl_objective(current, batch, -1.0)
}

/// L_R = mean KL(P_original ‖ P_current) over the batch. Always ≥ 0.
pub fn retain_loss(current: &ModelState, batch: &Reference) -> Result<(f64, Vec<f64>)> {
    kl_objective(current, batch, 1.0)
}

fn nll_objective(current: &ModelState, samples: &[&PromptSample], sign: f64) -> Result<(f64, Vec<f64>)> {
    let (l, mut g) = batch_loss_grad(current, samples, |i, rec| rec.nll(samples[i].answer))?;
    g.iter_mut().for_each(|x| *x *= sign);
    Ok((sign * l, g))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    (na >= NORM_FLOOR && nb >= NORM_FLOOR).then(|| (dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Outcome of combining the shared-group gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub combined: Vec<f64>,
    /// g_R after normalization and projection (equal to the input when
    /// there was no conflict).
    pub retain: Vec<f64>,
    pub forget: Vec<f64>,
    pub conflict: bool,
}

/// ω_r·g_R' + ω_f·g_F', where each gradient loses its component along the
/// other when they conflict (g_R·g_F < 0). With `normalize` both inputs are
/// rescaled to unit norm first.
pub fn project_shared(g_r: &[f64], omega_r: f64, g_f: &[f64], omega_f: f64, normalize: bool) -> Projection {
    assert_eq!(g_r.len(), g_f.len(), "shared gradients must have equal length");
    let (nr, nf) = (norm(g_r), norm(g_f));
    let weighted = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| omega_r * x + omega_f * y).collect::<Vec<f64>>();
    if nr < NORM_FLOOR || nf < NORM_FLOOR {
        return Projection { combined: weighted(g_r, g_f), retain: g_r.to_vec(), forget: g_f.to_vec(), conflict: false };
    }
    let (r, f): (Vec<f64>, Vec<f64>) = if normalize {
        (g_r.iter().map(|x| x / nr).collect(), g_f.iter().map(|x| x / nf).collect())
    } else {
        (g_r.to_vec(), g_f.to_vec())
    };
    let rf = dot(&r, &f);
    if rf >= 0.0 {
        return Projection { combined: weighted(&r, &f), retain: r, forget: f, conflict: false };
    }
    let (rr, ff) = (dot(&r, &r), dot(&f, &f));
    let r2: Vec<f64> = r.iter().zip(&f).map(|(a, b)| a - rf / ff * b).collect();
    let f2: Vec<f64> = f.iter().zip(&r).map(|(a, b)| a - rf / rr * b).collect();
    Projection { combined: weighted(&r2, &f2), retain: r2, forget: f2, conflict: true }
}

/// Normalized alignments (A_f, A_r) of an update direction `g`.
pub fn alignment(g: &[f64], g_f: &[f64], g_r: &[f64]) -> (Option<f64>, Option<f64>) {
    let a = |x: &[f64]| {
        let n2 = dot(x, x);
        (n2 >= NORM_FLOOR * NORM_FLOOR).then(|| dot(g, x) / n2)
    };
    (a(g_f), a(g_r))
}

fn gather(v: &[f64], ranges: &[Range<usize>]) -> Vec<f64> {
    ranges.iter().flat_map(|r| v[r.clone()].iter().copied()).collect()
}

fn scatter(dst: &mut [f64], ranges: &[Range<usize>], src: &[f64]) {
    let mut k = 0;
    for r in ranges {
        dst[r.clone()].copy_from_slice(&src[k..k + r.len()]);
        k += r.len();
    }
}

/// Per-group slices of the forget and retain gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGradients {
    pub shared_forget: Vec<f64>,
    pub shared_retain: Vec<f64>,
    pub forget_forget: Vec<f64>,
    pub retain_retain: Vec<f64>,
    /// Cross terms, for diagnostics only.
    pub forget_retain: Vec<f64>,
    pub retain_forget: Vec<f64>,
    /// cos ψ of the raw shared pair.
    pub cos_psi: Option<f64>,
    /// cos ψ of the shared pair after projection (what the step applied).
    pub cos_psi_applied: Option<f64>,
    pub conflict: bool,
}

impl GroupGradients {
    pub fn split(partition: &ParameterPartition, layout: &crate::model::Layout, g_f: &[f64], g_r: &[f64]) -> Self {
        let sh = partition.ranges(layout, Group::Shared);
        let fr = partition.ranges(layout, Group::Forget);
        let rr = partition.ranges(layout, Group::Retain);
        let shared_forget = gather(g_f, &sh);
        let shared_retain = gather(g_r, &sh);
        let cos_psi = cosine(&shared_retain, &shared_forget);
        Self {
            cos_psi,
            cos_psi_applied: cos_psi,
            conflict: false,
            forget_forget: gather(g_f, &fr),
            retain_retain: gather(g_r, &rr),
            forget_retain: gather(g_r, &fr),
            retain_forget: gather(g_f, &rr),
            shared_forget,
            shared_retain,
        }
    }
}

/// Optimizer state for one unlearning run over a fixed partition.
#[derive(Debug, Clone)]
pub struct Unlearner {
    pub config: UnlearnConfig,
    pub partition: ParameterPartition,
    trainable: Vec<Range<usize>>,
    adam: Option<AdamW>,
    steps: usize,
}

/// Samples used by a single step.
#[derive(Debug, Clone)]
pub struct StepBatch<'a> {
    pub forget: Reference<'a>,
    pub retain: Reference<'a>,
}

impl Unlearner {
    pub fn new(state: &ModelState, partition: ParameterPartition, config: UnlearnConfig) -> Result<Self> {
        config.validate()?;
        let trainable: Vec<Range<usize>> = partition.trainable().iter().map(|&n| state.layout().node_range(n)).collect();
        let adam = (config.step_rule == StepRule::Adamw).then(|| {
            AdamW::new(
                AdamWConfig {
                    lr: config.lr,
                    beta1: config.adam_beta1,
                    beta2: config.adam_beta2,
                    eps: 1e-8,
                    weight_decay: 0.0,
                },
                state.num_params(),
            )
        });
        Ok(Self { config, partition, trainable, adam, steps: 0 })
    }

    /// Ranges every method may update: the union of both circuits.
    pub fn trainable(&self) -> &[Range<usize>] {
        &self.trainable
    }

    /// Adds the seeded jitter to every trainable parameter.
    pub fn jitter(&self, state: &mut ModelState) {
        if self.config.jitter == 0.0 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x6a17);
        let normal = Normal::new(0.0, self.config.jitter).expect("finite std");
        for r in &self.trainable {
            for p in &mut state.params[r.clone()] {
                *p += normal.sample(&mut rng);
            }
        }
    }

    fn apply(&mut self, state: &mut ModelState, direction: &[f64]) {
        match &mut self.adam {
            Some(opt) => opt.step_ranges(&mut state.params, direction, &self.trainable),
            None => {
                for r in &self.trainable {
                    for i in r.clone() {
                        state.params[i] -= self.config.lr * direction[i];
                    }
                }
            }
        }
    }

    /// Update direction for the configured method from full-length gradients.
    fn direction(&self, state: &ModelState, g_f: &[f64], g_r: &[f64], groups: &mut GroupGradients) -> Vec<f64> {
        let (wr, wf) = (self.config.omega_r, self.config.omega_f());
        let mut d = vec![0.0; state.num_params()];
        match self.config.method {
            UnlearnMethod::Cure => {
                let layout = state.layout();
                let fr = self.partition.ranges(layout, Group::Forget);
                let rr = self.partition.ranges(layout, Group::Retain);
                let sh = self.partition.ranges(layout, Group::Shared);
                scatter(&mut d, &fr, &gather(g_f, &fr));
                scatter(&mut d, &rr, &gather(g_r, &rr));
                let p = project_shared(&groups.shared_retain, wr, &groups.shared_forget, wf, self.config.normalize_shared);
                groups.conflict = p.conflict;
                groups.cos_psi_applied = cosine(&p.retain, &p.forget);
                scatter(&mut d, &sh, &p.combined);
            }
            UnlearnMethod::Uniform | UnlearnMethod::GradientAscent => {
                for r in &self.trainable {
                    for i in r.clone() {
                        d[i] = wr * g_r[i] + wf * g_f[i];
                    }
                }
            }
        }
        d
    }

    /// One routed update. The losses in the returned row are measured before
    /// the update.
    pub fn step(&mut self, state: &mut ModelState, batch: &StepBatch) -> Result<(GroupGradients, TraceRow)> {
        let started = Instant::now();
        let ((l_f, g_f), (l_r, g_r)) = match self.config.method {
            UnlearnMethod::GradientAscent => (
                nll_objective(state, &batch.forget.samples, -1.0)?,
                nll_objective(state, &batch.retain.samples, 1.0)?,
            ),
            _ => (forget_loss(state, &batch.forget)?, retain_loss(state, &batch.retain)?),
        };
        if let Some(i) = g_f.iter().chain(&g_r).position(|g| !g.is_finite()) {
            let name = &state.layout().tensors().iter().find(|t| t.range().contains(&(i % state.num_params()))).expect("index in layout").name;
            return Err(Error::NonFinite(format!("unlearning gradient at step {} in {name}", self.steps)));
        }
        let mut groups = GroupGradients::split(&self.partition, state.layout(), &g_f, &g_r);
        let d = self.direction(state, &g_f, &g_r, &mut groups);
        let (a_f, a_r) = alignment(&gather(&d, &self.trainable), &gather(&g_f, &self.trainable), &gather(&g_r, &self.trainable));
        self.apply(state, &d);
        let cos_psi = match self.config.method {
            UnlearnMethod::Cure => groups.cos_psi_applied,
            _ => groups.cos_psi,
        };
        let row = TraceRow {
            step: self.steps,
            l_f,
            l_r,
            l: self.config.omega_f() * l_f + self.config.omega_r * l_r,
            a_f,
            a_r,
            cos_psi,
            conflict: cos_psi.is_some_and(|c| c < self.config.conflict_threshold),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            cos_psi_raw: groups.cos_psi,
        };
        self.steps += 1;
        Ok((groups, row))
    }
}

/// Cycles through shuffled copies of the forget and retain references.
#[derive(Debug)]
pub struct BatchStream<'a> {
    forget: Reference<'a>,
    retain: Reference<'a>,
    forget_order: Vec<usize>,
    retain_order: Vec<usize>,
    forget_pos: usize,
    retain_pos: usize,
    forget_batch: usize,
    retain_batch: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(forget: Reference<'a>, retain: Reference<'a>, config: &UnlearnConfig) -> Result<Self> {
        if forget.is_empty() {
            return Err(Error::Split("forget set is empty".into()));
        }
        if retain.is_empty() {
            return Err(Error::Split("retain buffer is empty".into()));
        }
        let forget_order = (0..forget.len()).collect();
        let retain_order = (0..retain.len()).collect();
        let mut s = Self {
            forget_batch: config.forget_batch.min(forget.len()),
            retain_batch: config.retain_batch.min(retain.len()),
            forget,
            retain,
            forget_order,
            retain_order,
            forget_pos: 0,
            retain_pos: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        s.forget_order.shuffle(&mut s.rng);
        s.retain_order.shuffle(&mut s.rng);
        Ok(s)
    }

    fn take(order: &mut Vec<usize>, pos: &mut usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if *pos + n > order.len() {
            order.shuffle(rng);
            *pos = 0;
        }
        let out = order[*pos..*pos + n].to_vec();
        *pos += n;
        out
    }

    pub fn next_batch(&mut self) -> StepBatch<'a> {
        let f = Self::take(&mut self.forget_order, &mut self.forget_pos, self.forget_batch, &mut self.rng);
        let r = Self::take(&mut self.retain_order, &mut self.retain_pos, self.retain_batch, &mut self.rng);
        StepBatch { forget: self.forget.subset(&f), retain: self.retain.subset(&r) }
    }
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub model: ModelState,
    pub trace: AlignmentTrace,
    pub wall: Duration,
}

/// Runs `config.steps` updates of `config.method` from `original`.
/// `forget` and `retain` are the forget set and the retain buffer.
pub fn run_unlearning(
    original: &ModelState,
    partition: &ParameterPartition,
    forget: &[&PromptSample],
    retain: &[&PromptSample],
    config: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    let started = Instant::now();
    let mut model = original.clone();
    let mut trace = AlignmentTrace::default();
    if config.steps == 0 {
        config.validate()?;
        return Ok(UnlearnOutcome { model, trace, wall: started.elapsed() });
    }
    let mut unlearner = Unlearner::new(original, partition.clone(), config.clone())?;
    let mut stream =
        BatchStream::new(Reference::new(original, forget.to_vec())?, Reference::new(original, retain.to_vec())?, config)?;
    unlearner.jitter(&mut model);
    for _ in 0..config.steps {
        let batch = stream.next_batch();
        let (_, row) = unlearner.step(&mut model, &batch)?;
        log::debug!("unlearn step {}: L_F {:.5} L_R {:.5} cos {:?}", row.step, row.l_f, row.l_r, row.cos_psi);
        trace.rows.push(row);
    }
    if let Some(name) = model.first_non_finite() {
        return Err(Error::NonFinite(format!("parameter {name} after unlearning")));
    }
    Ok(UnlearnOutcome { model, trace, wall: started.elapsed() })
}

/// Joint ω_f∇L_F + ω_r∇L_R applied to every circuit parameter.
pub fn baseline_uniform(
    original: &ModelState,
    partition: &ParameterPartition,
    forget: &[&PromptSample],
    retain: &[&PromptSample],
    config: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    run_unlearning(original, partition, forget, retain, &UnlearnConfig { method: UnlearnMethod::Uniform, ..config.clone() })
}

/// Ascends the answer NLL on the forget set while descending it on the
/// retain buffer, over every circuit parameter.
pub fn baseline_gradient_ascent(
    original: &ModelState,
    partition: &ParameterPartition,
    forget: &[&PromptSample],
    retain: &[&PromptSample],
    config: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    run_unlearning(
        original,
        partition,
        forget,
        retain,
        &UnlearnConfig { method: UnlearnMethod::GradientAscent, ..config.clone() },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let p = project_shared(&[1.0, 0.0], 0.5, &[-1.0, 1.0], 0.5, false);
        assert!(p.conflict);
        assert_eq!(p.retain, vec![0.5, 0.5]);
        // g_F − (g_F·g_R/‖g_R‖²)·g_R = (−1, 1) + (1, 0)
        assert_eq!(p.forget, vec![0.0, 1.0]);
        assert_eq!(p.combined, vec![0.25, 0.75]);
        assert!(dot(&p.forget, &[1.0, 0.0]) >= 0.0);

        let same = project_shared(&[0.3, -0.2], 0.6, &[0.3, -0.2], 0.4, true);
        assert!(!same.conflict);
        let anti = project_shared(&[0.3, -0.2], 0.6, &[-0.3, 0.2], 0.4, true);
        assert!(anti.combined.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn zero_norm_skips_projection() {
        let p = project_shared(&[0.0, 0.0], 0.6, &[1.0, 2.0], 0.4, true);
        assert!(!p.conflict);
        assert_eq!(p.combined, vec![0.4, 0.8]);
    }

    #[test]
    fn alignment_examples() {
        let gf = [1.0, 0.0];
        let gr = [0.0, 2.0];
        assert_eq!(alignment(&gf, &gf, &gr).0, Some(1.0));
        assert_eq!(alignment(&[0.0, 1.0], &gf, &gr).0, Some(0.0));
        let g: Vec<f64> = gf.iter().zip(&gr).map(|(a, b)| 0.4 * a + 0.6 * b).collect();
        let (af, ar) = alignment(&g, &gf, &gr);
        assert!((af.unwrap() - 0.4).abs() < 1e-15 && (ar.unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(alignment(&g, &[0.0, 0.0], &gr).0, None);
    }

    #[test]
    fn config_validation() {
        assert!(UnlearnConfig::default().validate().is_ok());
        assert!(UnlearnConfig { omega_r: 1.0, ..Default::default() }.validate().is_err());
        assert!(UnlearnConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!("ga".parse::<UnlearnMethod>().unwrap(), UnlearnMethod::GradientAscent);
    }
}
