// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checks of the one-step guarantee on synthetic quadratics, and of the
//! first-order loss change on a real model.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{dot, forget_loss, gather, norm, project_shared, retain_loss, Reference};
use crate::circuits::ParameterPartition;
use crate::error::Result;
use crate::model::ModelState;

/// Shape of random instances. Gradients are drawn at the origin; blocks are
/// laid out as [shared | forget-specific | retain-specific].
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSpec {
    pub shared: usize,
    pub forget: usize,
    pub retain: usize,
    pub omega_r: f64,
    /// Largest ‖g^R_f‖ / ‖g^F_f‖ (and the retain-side mirror).
    pub leakage: f64,
    /// Range of the specific-block norms ‖g^F_f‖, ‖g^R_r‖.
    pub specific_norm: (f64, f64),
    /// Bound on the spectral norm of each loss Hessian.
    pub hessian_norm: f64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self { shared: 8, forget: 6, retain: 6, omega_r: 0.6, leakage: 0.25, specific_norm: (0.5, 2.0), hessian_norm: 1.0 }
    }
}

/// L(δ) = ω_r·(g_R·δ + ½δᵀH_Rδ) + ω_f·(g_F·δ + ½δᵀH_Fδ).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticInstance {
    pub spec: InstanceSpec,
    pub g_r: Vec<f64>,
    pub g_f: Vec<f64>,
    pub h_r: Vec<f64>,
    pub h_f: Vec<f64>,
    /// cos ψ between the shared gradients.
    pub cos_psi: f64,
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let v = gaussian(rng, n);
    let s = norm(&v);
    v.into_iter().map(|x| x / s).collect()
}

/// Symmetric matrix scaled so its Frobenius norm (an upper bound on the
/// spectral norm) is `bound`.
fn hessian(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    let m = gaussian(rng, n * n);
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] = 0.5 * (m[i * n + j] + m[j * n + i]);
        }
    }
    let f = norm(&h);
    h.iter_mut().for_each(|x| *x *= bound / f);
    h
}

impl QuadraticInstance {
    pub fn random(rng: &mut impl Rng, spec: &InstanceSpec) -> Self {
        let (s, f, r) = (spec.shared, spec.forget, spec.retain);
        let n = s + f + r;
        let c: f64 = rng.gen_range(-1.0..=1.0);
        // Unit shared pair with cosine c.
        let a = unit(rng, s);
        let mut b = unit(rng, s);
        let ab = dot(&a, &b);
        b.iter_mut().zip(&a).for_each(|(x, y)| *x -= ab * y);
        let nb = norm(&b);
        let shared_f: Vec<f64> = a.iter().zip(&b).map(|(x, y)| c * x + (1.0 - c * c).sqrt() * y / nb).collect();
        let shared_r = a;
        let (lo, hi) = spec.specific_norm;
        let mut block = |len: usize| {
            let main_norm = rng.gen_range(lo..=hi);
            let leak_norm = main_norm * rng.gen_range(0.0..=spec.leakage);
            let main: Vec<f64> = unit(rng, len).into_iter().map(|x| x * main_norm).collect();
            let leak: Vec<f64> = unit(rng, len).into_iter().map(|x| x * leak_norm).collect();
            (main, leak)
        };
        let (ff, fr) = block(f);
        let (rr, rf) = block(r);
        let g_f = [shared_f, ff, rf].concat();
        let g_r = [shared_r, fr, rr].concat();
        let h_r = hessian(rng, n, spec.hessian_norm);
        let h_f = hessian(rng, n, spec.hessian_norm);
        Self { spec: spec.clone(), g_r, g_f, h_r, h_f, cos_psi: c }
    }

    pub fn dim(&self) -> usize {
        self.g_r.len()
    }

    pub fn loss(&self, delta: &[f64]) -> f64 {
        let n = self.dim();
        let quad = |h: &[f64]| -> f64 { (0..n).map(|i| delta[i] * dot(&h[i * n..(i + 1) * n], delta)).sum() };
        let w = self.spec.omega_r;
        w * (dot(&self.g_r, delta) + 0.5 * quad(&self.h_r)) + (1.0 - w) * (dot(&self.g_f, delta) + 0.5 * quad(&self.h_f))
    }

    /// Θ̂ − Θ: projected shared step and unweighted specific steps.
    pub fn cure_delta(&self, alpha: f64) -> Vec<f64> {
        let s = self.spec.shared;
        let fe = s + self.spec.forget;
        let w = self.spec.omega_r;
        let p = project_shared(&self.g_r[..s], w, &self.g_f[..s], 1.0 - w, true);
        let mut d: Vec<f64> = p.combined;
        d.extend(self.g_f[s..fe].iter());
        d.extend(self.g_r[fe..].iter());
        d.iter_mut().for_each(|x| *x *= -alpha);
        d
    }

    /// Θ̃ − Θ: the weighted joint step everywhere.
    pub fn uniform_delta(&self, alpha: f64) -> Vec<f64> {
        let w = self.spec.omega_r;
        self.g_r.iter().zip(&self.g_f).map(|(r, f)| -alpha * (w * r + (1.0 - w) * f)).collect()
    }

    /// L(Θ̂) − L(Θ̃).
    pub fn gap(&self, alpha: f64) -> f64 {
        self.loss(&self.cure_delta(alpha)) - self.loss(&self.uniform_delta(alpha))
    }
}

/// The shared-block condition for a non-negative first-order gain:
/// cos ψ ≥ −γ / (ω_r + (1 − ω_r)·γ²).
pub fn part_a_holds(cos_psi: f64, gamma: f64, omega_r: f64) -> bool {
    cos_psi >= -gamma / (omega_r + (1.0 - omega_r) * gamma * gamma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrderCheck {
    pub alpha: f64,
    /// L(θ − α·g) − L(θ)
    pub measured: f64,
    /// −α(ω_f·g·g_f + ω_r·g·g_r)
    pub predicted: f64,
}

impl FirstOrderCheck {
    pub fn error(&self) -> f64 {
        (self.measured - self.predicted).abs()
    }
}

/// Takes one plain uniform step g = ω_f·g_f + ω_r·g_r over the circuit
/// parameters and compares the measured joint-loss change with its
/// first-order prediction.
pub fn first_order_check(
    state: &ModelState,
    partition: &ParameterPartition,
    forget: &Reference,
    retain: &Reference,
    omega_r: f64,
    alpha: f64,
) -> Result<FirstOrderCheck> {
    let omega_f = 1.0 - omega_r;
    let ranges: Vec<_> = partition.trainable().iter().map(|&n| state.layout().node_range(n)).collect();
    let (lf, gf) = forget_loss(state, forget)?;
    let (lr, gr) = retain_loss(state, retain)?;
    let (gf, gr) = (gather(&gf, &ranges), gather(&gr, &ranges));
    let g: Vec<f64> = gf.iter().zip(&gr).map(|(f, r)| omega_f * f + omega_r * r).collect();
    let mut moved = state.clone();
    let mut k = 0;
    for r in &ranges {
        for i in r.clone() {
            moved.params[i] -= alpha * g[k];
            k += 1;
        }
    }
    let (lf2, _) = forget_loss(&moved, forget)?;
    let (lr2, _) = retain_loss(&moved, retain)?;
    let measured = (omega_f * lf2 + omega_r * lr2) - (omega_f * lf + omega_r * lr);
    let predicted = -alpha * (omega_f * dot(&g, &gf) + omega_r * dot(&g, &gr));
    Ok(FirstOrderCheck { alpha, measured, predicted })
}
