// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use circuit_unlearn::circuits::{Group, ParameterPartition};
use circuit_unlearn::interactions::{Answer, PromptSample};
use circuit_unlearn::model::{ModelConfig, ModelState, RecordLevel};
use circuit_unlearn::unlearn::{
    forget_loss, retain_loss, run_unlearning, Reference, StepBatch, StepRule, UnlearnConfig, UnlearnMethod, Unlearner,
};

fn toy(seed: u64) -> ModelState {
    ModelState::init(ModelConfig {
        width: 8,
        heads: 2,
        mlp_width: 16,
        vocab_size: 12,
        max_seq_len: 8,
        seed,
        init_std: 0.3,
        ..Default::default()
    })
    .unwrap()
}

fn samples(seed: u64, n: usize) -> Vec<PromptSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| PromptSample {
            user: 0,
            history: vec![],
            target: 0,
            tokens: (0..6).map(|_| rng.gen_range(0..12)).collect(),
            answer: if i % 2 == 0 { Answer::Yes } else { Answer::No },
            item_spans: vec![],
            edge: None,
        })
        .collect()
}

fn perturbed(state: &ModelState, scale: f64, seed: u64) -> ModelState {
    let mut s = state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    s.params.iter_mut().for_each(|p| *p += scale * (rng.gen::<f64>() - 0.5));
    s
}

/// Two heads per layer, two layers: nodes 1..=6 are internal.
fn partition(state: &ModelState) -> ParameterPartition {
    let dag = state.dag();
    let internal: Vec<usize> = (0..dag.num_nodes()).filter(|&n| n != dag.input() && n != dag.logits()).collect();
    ParameterPartition {
        forget: internal[..2].to_vec(),
        retain: internal[2..4].to_vec(),
        shared: internal[4..5].to_vec(),
        untouched: [dag.input()].into_iter().chain(internal[5..].iter().copied()).chain([dag.logits()]).collect(),
    }
}

fn sgd(method: UnlearnMethod) -> UnlearnConfig {
    UnlearnConfig { method, step_rule: StepRule::Sgd, lr: 0.05, jitter: 0.0, ..UnlearnConfig::default() }
}

fn binary_kl(p: f64, q: f64) -> f64 {
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

#[test]
fn kl_losses_match_closed_form() {
    let model = toy(1);
    let data = samples(2, 5);
    let probs = vec![0.9, 0.1, 0.5, 0.3, 0.99];
    let r = Reference { samples: data.iter().collect(), probs: probs.clone() };
    let qs: Vec<f64> = data.iter().map(|s| model.forward(&s.tokens, RecordLevel::None).unwrap().yes_prob()).collect();
    let want = probs.iter().zip(&qs).map(|(&p, &q)| binary_kl(p, q)).sum::<f64>() / 5.0;
    let (lf, _) = forget_loss(&model, &r).unwrap();
    let (lr, _) = retain_loss(&model, &r).unwrap();
    assert!((lf + want).abs() < 1e-12 && (lr - want).abs() < 1e-12);
    assert!((binary_kl(0.9, 0.1) - 0.8 * 9f64.ln()).abs() < 1e-12);
}

#[test]
fn kl_losses_vanish_at_original() {
    let model = toy(3);
    let data = samples(4, 6);
    let r = Reference::new(&model, data.iter().collect()).unwrap();
    let (lf, gf) = forget_loss(&model, &r).unwrap();
    let (lr, gr) = retain_loss(&model, &r).unwrap();
    assert_eq!((lf, lr), (0.0, 0.0));
    assert!(gf.iter().chain(&gr).all(|g| *g == 0.0));
}

#[test]
fn kl_gradients_match_finite_differences() {
    let original = toy(5);
    let current = perturbed(&original, 0.2, 6);
    let data = samples(7, 4);
    let r = Reference::new(&original, data.iter().collect()).unwrap();
    for loss in [forget_loss, retain_loss] {
        let (_, g) = loss(&current, &r).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..60 {
            let i = rng.gen_range(0..current.num_params());
            let h = 1e-5;
            let eval = |d: f64| {
                let mut s = current.clone();
                s.params[i] += d;
                loss(&s, &r).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-6), "param {i}: fd {fd} vs {}", g[i]);
        }
    }
}

#[test]
fn retain_loss_ignores_batch_order() {
    let original = toy(9);
    let current = perturbed(&original, 0.3, 10);
    let data = samples(11, 7);
    let fwd = Reference::new(&original, data.iter().collect()).unwrap();
    let rev = Reference::new(&original, data.iter().rev().collect()).unwrap();
    let (a, _) = retain_loss(&current, &fwd).unwrap();
    let (b, _) = retain_loss(&current, &rev).unwrap();
    assert!((a - b).abs() < 1e-14);
}

#[test]
fn untouched_parameters_are_bit_identical_after_many_steps() {
    let original = toy(12);
    let data = samples(13, 20);
    let (f, r) = data.split_at(8);
    let p = partition(&original);
    for method in [UnlearnMethod::Cure, UnlearnMethod::Uniform, UnlearnMethod::GradientAscent] {
        let cfg = UnlearnConfig { method, steps: 100, forget_batch: 4, retain_batch: 6, ..UnlearnConfig::default() };
        let out = run_unlearning(&original, &p, &f.iter().collect::<Vec<_>>(), &r.iter().collect::<Vec<_>>(), &cfg).unwrap();
        assert_eq!(out.trace.len(), 100);
        for range in p.ranges(original.layout(), Group::Untouched) {
            assert_eq!(out.model.params[range.clone()], original.params[range], "{method:?}");
        }
        let moved = p.ranges(original.layout(), Group::Forget).into_iter().any(|rg| out.model.params[rg.clone()] != original.params[rg]);
        assert!(moved, "{method:?} never moved the forget group");
    }
}

#[test]
fn forget_group_never_sees_retain_gradient() {
    let original = toy(14);
    let current = perturbed(&original, 0.2, 15);
    let data = samples(16, 10);
    let p = partition(&original);
    let mut u = Unlearner::new(&current, p.clone(), sgd(UnlearnMethod::Cure)).unwrap();
    // Forget reference equal to the current predictions makes L_F flat.
    let forget = Reference::new(&current, data[..5].iter().collect()).unwrap();
    let retain = Reference::new(&original, data[5..].iter().collect()).unwrap();
    let mut s = current.clone();
    u.step(&mut s, &StepBatch { forget, retain }).unwrap();
    let layout = original.layout();
    for rg in p.ranges(layout, Group::Forget) {
        assert_eq!(s.params[rg.clone()], current.params[rg]);
    }
    assert!(p.ranges(layout, Group::Retain).into_iter().any(|rg| s.params[rg.clone()] != current.params[rg]));

    let mut u = Unlearner::new(&current, p.clone(), sgd(UnlearnMethod::Cure)).unwrap();
    let forget = Reference::new(&original, data[..5].iter().collect()).unwrap();
    let retain = Reference::new(&current, data[5..].iter().collect()).unwrap();
    let mut s = current.clone();
    u.step(&mut s, &StepBatch { forget, retain }).unwrap();
    for rg in p.ranges(layout, Group::Retain) {
        assert_eq!(s.params[rg.clone()], current.params[rg]);
    }
}

#[test]
fn empty_shared_group_is_two_independent_updates() {
    let original = toy(17);
    let current = perturbed(&original, 0.2, 18);
    let data = samples(19, 10);
    let mut p = partition(&original);
    p.untouched.extend(p.shared.drain(..));
    let forget = Reference::new(&original, data[..5].iter().collect()).unwrap();
    let retain = Reference::new(&original, data[5..].iter().collect()).unwrap();
    let (_, gf) = forget_loss(&current, &forget).unwrap();
    let (_, gr) = retain_loss(&current, &retain).unwrap();
    let cfg = sgd(UnlearnMethod::Cure);
    let mut u = Unlearner::new(&current, p.clone(), cfg.clone()).unwrap();
    let mut s = current.clone();
    let (groups, row) = u.step(&mut s, &StepBatch { forget, retain }).unwrap();
    assert!(groups.shared_forget.is_empty() && row.cos_psi.is_none());
    let layout = original.layout();
    for (group, g) in [(Group::Forget, &gf), (Group::Retain, &gr)] {
        for rg in p.ranges(layout, group) {
            for i in rg {
                assert_eq!(s.params[i], current.params[i] - cfg.lr * g[i]);
            }
        }
    }
}

#[test]
fn zero_steps_returns_original() {
    let original = toy(20);
    let data = samples(21, 6);
    let refs: Vec<&PromptSample> = data.iter().collect();
    let cfg = UnlearnConfig { steps: 0, ..UnlearnConfig::default() };
    let out = run_unlearning(&original, &partition(&original), &refs[..3], &refs[3..], &cfg).unwrap();
    assert_eq!(out.model, original);
    assert!(out.trace.is_empty());
}

#[test]
fn identical_seeds_give_identical_traces() {
    let original = toy(22);
    let data = samples(23, 12);
    let refs: Vec<&PromptSample> = data.iter().collect();
    let cfg = UnlearnConfig { method: UnlearnMethod::Uniform, steps: 8, forget_batch: 3, retain_batch: 4, ..UnlearnConfig::default() };
    let run = || run_unlearning(&original, &partition(&original), &refs[..5], &refs[5..], &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.model, b.model);
    let strip = |t: &circuit_unlearn::unlearn::AlignmentTrace| {
        t.rows.iter().map(|r| (r.l_f, r.l_r, r.a_f, r.a_r, r.cos_psi)).collect::<Vec<_>>()
    };
    assert_eq!(strip(&a.trace), strip(&b.trace));
}

#[test]
fn cure_applied_shared_pair_never_conflicts() {
    let original = toy(24);
    let data = samples(25, 16);
    let refs: Vec<&PromptSample> = data.iter().collect();
    let cfg = UnlearnConfig { steps: 30, forget_batch: 4, retain_batch: 4, jitter: 1e-2, ..UnlearnConfig::default() };
    let out = run_unlearning(&original, &partition(&original), &refs[..6], &refs[6..], &cfg).unwrap();
    assert!(out.trace.rows.iter().all(|r| r.cos_psi.is_none_or(|c| c >= -1e-12)));
    assert_eq!(out.trace.conflict_rate(), 0.0);
}

#[test]
fn one_ascent_step_raises_forget_nll() {
    let original = toy(26);
    let data = samples(27, 10);
    let nll = |s: &ModelState| data[..5].iter().map(|x| s.forward(&x.tokens, RecordLevel::None).unwrap().nll(x.answer).0).sum::<f64>();
    let cfg = UnlearnConfig { lr: 1e-3, ..sgd(UnlearnMethod::GradientAscent) };
    let mut u = Unlearner::new(&original, partition(&original), cfg).unwrap();
    let mut s = original.clone();
    let batch = StepBatch {
        forget: Reference::new(&original, data[..5].iter().collect()).unwrap(),
        retain: Reference::new(&original, data[5..].iter().collect()).unwrap(),
    };
    u.step(&mut s, &batch).unwrap();
    assert!(nll(&s) > nll(&original));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kl_signs(seed in 0u64..1000, scale in 0.0f64..0.5, probs in proptest::collection::vec(0.0f64..=1.0, 4)) {
        let model = perturbed(&toy(seed % 7), scale, seed);
        let data = samples(seed, 4);
        let r = Reference { samples: data.iter().collect(), probs };
        let (lf, _) = forget_loss(&model, &r).unwrap();
        let (lr, _) = retain_loss(&model, &r).unwrap();
        prop_assert!(lf <= 0.0 && lr >= 0.0 && lf.is_finite());
    }
}
