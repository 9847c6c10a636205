// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass, reverse-mode backward pass and edge interventions.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::ops::Range;

use super::ops::{
    add_bias, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul_acc, matmul_at_acc, matmul_bt_acc,
    sigmoid, sum_rows_acc,
};
use super::{DagEdge, EdgeScope, ModelState, NodeId, NodeKind, ProbMode, RecordLevel, Role};
use crate::error::{Error, Result};
use crate::interactions::{Answer, NO_ID, YES_ID};

thread_local! {
    static FORWARDS: Cell<u64> = const { Cell::new(0) };
    static BACKWARDS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PassCounts {
    pub forward: u64,
    pub backward: u64,
}

/// Passes executed on the current thread since the last reset.
pub fn pass_counts() -> PassCounts {
    PassCounts { forward: FORWARDS.with(Cell::get), backward: BACKWARDS.with(Cell::get) }
}

pub fn reset_pass_counts() {
    FORWARDS.with(|c| c.set(0));
    BACKWARDS.with(|c| c.set(0));
}

/// Edge message replacements. Each message covers the recorded positions
/// (one row for [`EdgeScope::AnswerPosition`], all rows otherwise).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Patch {
    replacements: BTreeMap<DagEdge, Vec<f64>>,
}

impl Patch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, edge: DagEdge, message: Vec<f64>) -> &mut Self {
        self.replacements.insert(edge, message);
        self
    }

    pub fn zero(&mut self, edge: DagEdge, len: usize) -> &mut Self {
        self.set(edge, vec![0.0; len])
    }

    pub fn is_empty(&self) -> bool {
        self.replacements.is_empty()
    }

    pub fn len(&self) -> usize {
        self.replacements.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = DagEdge> + '_ {
        self.replacements.keys().copied()
    }
}

/// Output of one forward pass, plus whatever was recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub prob_mode: ProbMode,
    /// Next-token logits at the answer position.
    pub answer_logits: Vec<f64>,
    pub p_yes: f64,
    pub p_no: f64,
    /// P(Yes) − P(No).
    pub delta: f64,
    /// Token positions covered by recorded messages and gradients.
    pub positions: Range<usize>,
    /// Output of every node at `positions` (empty for the logits node).
    pub node_outputs: Option<Vec<Vec<f64>>>,
    /// Input of every node at `positions` (empty for the input node).
    pub node_inputs: Option<Vec<Vec<f64>>>,
    /// ∂Δ/∂(node input) at `positions`, through that node's own branch.
    pub node_grads: Option<Vec<Vec<f64>>>,
    /// ∂Δ/∂(token + position embedding) at every position.
    pub embedding_grad: Option<Vec<f64>>,
    upstream: Vec<NodeId>,
}

impl ForwardRecord {
    /// Message carried by `edge`: the upstream node's output.
    pub fn message(&self, edge: DagEdge) -> Option<&[f64]> {
        self.node_outputs.as_ref().map(|o| o[self.upstream[edge]].as_slice())
    }

    /// P(Yes) within the binary {Yes, No} distribution.
    pub fn yes_prob(&self) -> f64 {
        sigmoid(self.answer_logits[YES_ID as usize] - self.answer_logits[NO_ID as usize])
    }

    /// Logit-space gradient of Δ.
    pub fn delta_seed(&self) -> Vec<f64> {
        let mut seed = vec![0.0; self.answer_logits.len()];
        let (y, n) = (YES_ID as usize, NO_ID as usize);
        match self.prob_mode {
            ProbMode::Restricted => {
                let g = 0.5 * (1.0 - self.delta * self.delta);
                seed[y] = g;
                seed[n] = -g;
            }
            ProbMode::Full => {
                let p = softmax(&self.answer_logits);
                for (j, s) in seed.iter_mut().enumerate() {
                    *s = -self.delta * p[j];
                }
                seed[y] += p[y];
                seed[n] -= p[n];
            }
        }
        seed
    }

    /// −log P(answer) and its logit-space gradient.
    pub fn nll(&self, answer: Answer) -> (f64, Vec<f64>) {
        let mut seed = vec![0.0; self.answer_logits.len()];
        let (y, n) = (YES_ID as usize, NO_ID as usize);
        match self.prob_mode {
            ProbMode::Restricted => {
                let z = self.answer_logits[y] - self.answer_logits[n];
                let (loss, target) = match answer {
                    Answer::Yes => (softplus(-z), 1.0),
                    Answer::No => (softplus(z), 0.0),
                };
                let g = sigmoid(z) - target;
                seed[y] = g;
                seed[n] = -g;
                (loss, seed)
            }
            ProbMode::Full => {
                let p = softmax(&self.answer_logits);
                let t = if answer == Answer::Yes { y } else { n };
                seed.copy_from_slice(&p);
                seed[t] -= 1.0;
                (-p[t].max(f64::MIN_POSITIVE).ln(), seed)
            }
        }
    }

    /// Logit-space gradient of a loss whose derivative in [`Self::yes_prob`] is `dl_dp`.
    pub fn yes_prob_seed(&self, dl_dp: f64) -> Vec<f64> {
        let mut seed = vec![0.0; self.answer_logits.len()];
        let p = self.yes_prob();
        let g = dl_dp * p * (1.0 - p);
        seed[YES_ID as usize] = g;
        seed[NO_ID as usize] = -g;
        seed
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone)]
enum Cache {
    Input,
    Head { xhat: Vec<f64>, rstd: Vec<f64>, ln: Vec<f64>, q: Vec<f64>, k: Vec<f64>, v: Vec<f64>, a: Vec<f64>, z: Vec<f64> },
    Mlp { xhat: Vec<f64>, rstd: Vec<f64>, ln: Vec<f64>, pre: Vec<f64>, act: Vec<f64> },
    Logits { xhat: Vec<f64>, rstd: Vec<f64>, ln: Vec<f64> },
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Tape {
    tokens: Vec<u32>,
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    caches: Vec<Cache>,
    logits: Vec<f64>,
    patched: Vec<DagEdge>,
}

impl Tape {
    fn len(&self) -> usize {
        self.tokens.len()
    }
}

pub(crate) struct Gradients {
    /// ∂/∂(node input), all positions.
    pub dx: Vec<Vec<f64>>,
    /// ∂/∂(input node output), all positions.
    pub demb: Vec<f64>,
}

impl ModelState {
    fn positions(&self, len: usize) -> Range<usize> {
        match self.config.edge_scope {
            EdgeScope::AnswerPosition => len - 1..len,
            EdgeScope::AllPositions => 0..len,
        }
    }

    /// Length of one recorded message for a prompt of `len` tokens.
    pub fn message_len(&self, len: usize) -> usize {
        self.positions(len).len() * self.config.width
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Prompt("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: self.config.max_seq_len });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { token: t, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[u32], record: RecordLevel) -> Result<ForwardRecord> {
        self.intervene_forward(tokens, &Patch::new(), record)
    }

    /// Exact forward pass with the given edge messages replaced; everything
    /// downstream is recomputed.
    pub fn intervene_forward(&self, tokens: &[u32], patch: &Patch, record: RecordLevel) -> Result<ForwardRecord> {
        let tape = self.run(tokens, patch)?;
        let mut rec = self.readout(&tape, record);
        if record == RecordLevel::MessagesAndGrads {
            let seed = rec.delta_seed();
            let g = self.backward(&tape, &seed, None);
            let pos = rec.positions.clone();
            let d = self.config.width;
            let rows = |v: &Vec<f64>| v[pos.start * d..pos.end * d].to_vec();
            let grads: Vec<Vec<f64>> =
                g.dx.iter().enumerate().map(|(n, v)| if n == 0 { Vec::new() } else { rows(v) }).collect();
            if let Some(bad) = grads.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite(format!("gradient at node {}", self.dag.node_name(bad))));
            }
            rec.node_grads = Some(grads);
            rec.embedding_grad = Some(g.demb);
        }
        Ok(rec)
    }

    /// Loss value and parameter gradient (accumulated into `grads`) for one prompt.
    pub fn loss_grad<F>(&self, tokens: &[u32], grads: &mut [f64], objective: F) -> Result<f64>
    where
        F: FnOnce(&ForwardRecord) -> (f64, Vec<f64>),
    {
        let tape = self.run(tokens, &Patch::new())?;
        let rec = self.readout(&tape, RecordLevel::None);
        let (loss, seed) = objective(&rec);
        self.backward(&tape, &seed, Some(grads));
        Ok(loss)
    }

    fn readout(&self, tape: &Tape, record: RecordLevel) -> ForwardRecord {
        let z = &tape.logits;
        let (p_yes, p_no) = match self.config.prob_mode {
            ProbMode::Restricted => {
                let s = sigmoid(z[YES_ID as usize] - z[NO_ID as usize]);
                (s, 1.0 - s)
            }
            ProbMode::Full => {
                let p = softmax(z);
                (p[YES_ID as usize], p[NO_ID as usize])
            }
        };
        let positions = self.positions(tape.len());
        let d = self.config.width;
        let rows = |v: &Vec<f64>| if v.is_empty() { Vec::new() } else { v[positions.start * d..positions.end * d].to_vec() };
        let (node_outputs, node_inputs) = if record == RecordLevel::None {
            (None, None)
        } else {
            (Some(tape.outputs.iter().map(rows).collect()), Some(tape.inputs.iter().map(rows).collect()))
        };
        ForwardRecord {
            prob_mode: self.config.prob_mode,
            answer_logits: z.clone(),
            p_yes,
            p_no,
            delta: p_yes - p_no,
            positions,
            node_outputs,
            node_inputs,
            node_grads: None,
            embedding_grad: None,
            upstream: self.dag.edges().iter().map(|&(u, _)| u).collect(),
        }
    }

    pub(crate) fn run(&self, tokens: &[u32], patch: &Patch) -> Result<Tape> {
        self.check_tokens(tokens)?;
        let (t, d) = (tokens.len(), self.config.width);
        let positions = self.positions(t);
        for (e, msg) in &patch.replacements {
            if *e >= self.dag.num_edges() {
                return Err(Error::UnknownEdge(format!("edge index {e}")));
            }
            if msg.len() != positions.len() * d {
                return Err(Error::Config(format!(
                    "patch for {} has length {}, expected {}",
                    self.dag.edge_key(*e),
                    msg.len(),
                    positions.len() * d
                )));
            }
        }
        FORWARDS.with(|c| c.set(c.get() + 1));
        let n = self.dag.num_nodes();
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        let mut logits = Vec::new();
        for v in 0..n {
            let x = if v == 0 {
                Vec::new()
            } else {
                let mut x = vec![0.0; t * d];
                for &e in self.dag.incoming(v) {
                    let u = self.dag.edges()[e].0;
                    for (a, b) in x.iter_mut().zip(&outputs[u]) {
                        *a += b;
                    }
                    if let Some(msg) = patch.replacements.get(&e) {
                        let off = positions.start * d;
                        for (i, m) in msg.iter().enumerate() {
                            x[off + i] += m - outputs[u][off + i];
                        }
                    }
                }
                x
            };
            let (out, cache) = match self.dag.nodes()[v].kind {
                NodeKind::Input => (self.embed(tokens), Cache::Input),
                NodeKind::Head(_) => self.head_forward(v, &x, t),
                NodeKind::Mlp => self.mlp_forward(v, &x, t),
                NodeKind::Logits => {
                    let (z, cache) = self.logits_forward(v, &x[(t - 1) * d..]);
                    logits = z;
                    (Vec::new(), cache)
                }
            };
            inputs.push(x);
            outputs.push(out);
            caches.push(cache);
        }
        Ok(Tape { tokens: tokens.to_vec(), inputs, outputs, caches, logits, patched: patch.edges().collect() })
    }

    fn embed(&self, tokens: &[u32]) -> Vec<f64> {
        let d = self.config.width;
        let tok = self.param(0, Role::TokEmb);
        let pos = self.param(0, Role::PosEmb);
        let mut out = vec![0.0; tokens.len() * d];
        for (i, &id) in tokens.iter().enumerate() {
            let id = id as usize;
            for j in 0..d {
                out[i * d + j] = tok[id * d + j] + pos[i * d + j];
            }
        }
        out
    }

    fn head_forward(&self, node: NodeId, x: &[f64], t: usize) -> (Vec<f64>, Cache) {
        let (d, dh) = (self.config.width, self.config.head_dim());
        let p = |r| self.param(node, r);
        let (ln, xhat, rstd) = layer_norm(x, p(Role::LnGain), p(Role::LnBias));
        let project = |w, b| {
            let mut y = vec![0.0; t * dh];
            matmul_acc(&ln, p(w), &mut y, t, d, dh);
            add_bias(&mut y, p(b));
            y
        };
        let q = project(Role::Wq, Role::Bq);
        let k = project(Role::Wk, Role::Bk);
        let v = project(Role::Wv, Role::Bv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut a = vec![0.0; t * t];
        let mut z = vec![0.0; t * dh];
        for i in 0..t {
            let qi = &q[i * dh..(i + 1) * dh];
            let row = &mut a[i * t..i * t + i + 1];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k[j * dh..(j + 1) * dh]) * scale;
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - m).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
            let zi = &mut z[i * dh..(i + 1) * dh];
            for (j, &aij) in row.iter().enumerate() {
                for (zz, vv) in zi.iter_mut().zip(&v[j * dh..(j + 1) * dh]) {
                    *zz += aij * vv;
                }
            }
        }
        let mut out = vec![0.0; t * d];
        matmul_acc(&z, p(Role::Wo), &mut out, t, dh, d);
        add_bias(&mut out, p(Role::Bo));
        (out, Cache::Head { xhat, rstd, ln, q, k, v, a, z })
    }

    fn mlp_forward(&self, node: NodeId, x: &[f64], t: usize) -> (Vec<f64>, Cache) {
        let (d, m) = (self.config.width, self.config.mlp_width);
        let p = |r| self.param(node, r);
        let (ln, xhat, rstd) = layer_norm(x, p(Role::LnGain), p(Role::LnBias));
        let mut pre = vec![0.0; t * m];
        matmul_acc(&ln, p(Role::W1), &mut pre, t, d, m);
        add_bias(&mut pre, p(Role::B1));
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let mut out = vec![0.0; t * d];
        matmul_acc(&act, p(Role::W2), &mut out, t, m, d);
        add_bias(&mut out, p(Role::B2));
        (out, Cache::Mlp { xhat, rstd, ln, pre, act })
    }

    fn logits_forward(&self, node: NodeId, x_last: &[f64]) -> (Vec<f64>, Cache) {
        let (d, v) = (self.config.width, self.config.vocab_size);
        let (ln, xhat, rstd) = layer_norm(x_last, self.param(node, Role::LnGain), self.param(node, Role::LnBias));
        let mut z = vec![0.0; v];
        matmul_acc(&ln, self.param(node, Role::Unembed), &mut z, 1, d, v);
        (z, Cache::Logits { xhat, rstd, ln })
    }

    /// Backpropagates `dlogits` (gradient w.r.t. the answer-position logits).
    /// Parameter gradients are accumulated into `grads` when given.
    pub(crate) fn backward(&self, tape: &Tape, dlogits: &[f64], mut grads: Option<&mut [f64]>) -> Gradients {
        BACKWARDS.with(|c| c.set(c.get() + 1));
        let (t, d) = (tape.len(), self.config.width);
        let n = self.dag.num_nodes();
        let positions = self.positions(t);
        let mut dx: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut demb = Vec::new();
        for v in (0..n).rev() {
            let base = self.layout.node_range(v).start;
            let node_grads = grads.as_deref_mut().map(|g| &mut g[self.layout.node_range(v)]);
            let local = |role: Role| {
                let r = self.layout.range(v, role);
                r.start - base..r.end - base
            };
            if v == self.dag.logits() {
                let Cache::Logits { xhat, rstd, ln } = &tape.caches[v] else { unreachable!() };
                let vocab = self.config.vocab_size;
                let u = self.param(v, Role::Unembed);
                let mut dln = vec![0.0; d];
                matmul_bt_acc(dlogits, u, &mut dln, 1, d, vocab);
                let dxl = match node_grads {
                    Some(g) => {
                        matmul_at_acc(ln, dlogits, &mut g[local(Role::Unembed)], 1, d, vocab);
                        let (gg, gb) = g[local(Role::LnGain).start..local(Role::LnBias).end].split_at_mut(d);
                        layer_norm_backward(&dln, xhat, rstd, self.param(v, Role::LnGain), Some(gg), Some(gb))
                    }
                    None => layer_norm_backward(&dln, xhat, rstd, self.param(v, Role::LnGain), None, None),
                };
                let mut full = vec![0.0; t * d];
                full[(t - 1) * d..].copy_from_slice(&dxl);
                dx[v] = full;
                continue;
            }
            let mut dout = vec![0.0; t * d];
            for &e in self.dag.outgoing(v) {
                let w = self.dag.edges()[e].1;
                let patched = tape.patched.binary_search(&e).is_ok();
                for (i, (a, b)) in dout.iter_mut().zip(&dx[w]).enumerate() {
                    if patched && positions.contains(&(i / d)) {
                        continue;
                    }
                    *a += b;
                }
            }
            match &tape.caches[v] {
                Cache::Input => {
                    if let Some(g) = node_grads {
                        let tok = local(Role::TokEmb);
                        let pos = local(Role::PosEmb);
                        for (i, &id) in tape.tokens.iter().enumerate() {
                            let row = &dout[i * d..(i + 1) * d];
                            for j in 0..d {
                                g[tok.start + id as usize * d + j] += row[j];
                                g[pos.start + i * d + j] += row[j];
                            }
                        }
                    }
                    demb = dout;
                }
                Cache::Head { xhat, rstd, ln, q, k, v: val, a, z } => {
                    dx[v] = self.head_backward(v, t, &dout, (xhat, rstd, ln, q, k, val, a, z), node_grads, &local);
                }
                Cache::Mlp { xhat, rstd, ln, pre, act } => {
                    dx[v] = self.mlp_backward(v, t, &dout, (xhat, rstd, ln, pre, act), node_grads, &local);
                }
                Cache::Logits { .. } => unreachable!(),
            }
        }
        Gradients { dx, demb }
    }

    #[allow(clippy::type_complexity)]
    fn head_backward(
        &self,
        node: NodeId,
        t: usize,
        dout: &[f64],
        cache: (&Vec<f64>, &Vec<f64>, &Vec<f64>, &Vec<f64>, &Vec<f64>, &Vec<f64>, &Vec<f64>, &Vec<f64>),
        mut g: Option<&mut [f64]>,
        local: &dyn Fn(Role) -> Range<usize>,
    ) -> Vec<f64> {
        let (xhat, rstd, ln, q, k, v, a, z) = cache;
        let (d, dh) = (self.config.width, self.config.head_dim());
        let p = |r| self.param(node, r);
        if let Some(g) = g.as_deref_mut() {
            sum_rows_acc(dout, &mut g[local(Role::Bo)]);
            matmul_at_acc(z, dout, &mut g[local(Role::Wo)], t, dh, d);
        }
        let mut dz = vec![0.0; t * dh];
        matmul_bt_acc(dout, p(Role::Wo), &mut dz, t, dh, d);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; t * dh];
        let mut dk = vec![0.0; t * dh];
        let mut dv = vec![0.0; t * dh];
        let mut ds = vec![0.0; t];
        for i in 0..t {
            let dzi = &dz[i * dh..(i + 1) * dh];
            if dzi.iter().all(|&x| x == 0.0) {
                continue;
            }
            let ai = &a[i * t..i * t + i + 1];
            let mut weighted = 0.0;
            for j in 0..=i {
                let da = dot(dzi, &v[j * dh..(j + 1) * dh]);
                ds[j] = da;
                weighted += ai[j] * da;
                for (dvv, zz) in dv[j * dh..(j + 1) * dh].iter_mut().zip(dzi) {
                    *dvv += ai[j] * zz;
                }
            }
            for j in 0..=i {
                let s = ai[j] * (ds[j] - weighted) * scale;
                if s == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * dh + c] += s * k[j * dh + c];
                    dk[j * dh + c] += s * q[i * dh + c];
                }
            }
        }
        let mut dln = vec![0.0; t * d];
        for (dy, w, b) in [(&dq, Role::Wq, Role::Bq), (&dk, Role::Wk, Role::Bk), (&dv, Role::Wv, Role::Bv)] {
            if let Some(g) = g.as_deref_mut() {
                sum_rows_acc(dy, &mut g[local(b)]);
                matmul_at_acc(ln, dy, &mut g[local(w)], t, d, dh);
            }
            matmul_bt_acc(dy, p(w), &mut dln, t, d, dh);
        }
        match g {
            Some(g) => {
                let (gg, gb) = g[local(Role::LnGain).start..local(Role::LnBias).end].split_at_mut(d);
                layer_norm_backward(&dln, xhat, rstd, p(Role::LnGain), Some(gg), Some(gb))
            }
            None => layer_norm_backward(&dln, xhat, rstd, p(Role::LnGain), None, None),
        }
    }

    fn mlp_backward(
        &self,
        node: NodeId,
        t: usize,
        dout: &[f64],
        cache: (&Vec<f64>, &Vec<f64>, &Vec<f64>, &Vec<f64>, &Vec<f64>),
        mut g: Option<&mut [f64]>,
        local: &dyn Fn(Role) -> Range<usize>,
    ) -> Vec<f64> {
        let (xhat, rstd, ln, pre, act) = cache;
        let (d, m) = (self.config.width, self.config.mlp_width);
        let p = |r| self.param(node, r);
        if let Some(g) = g.as_deref_mut() {
            sum_rows_acc(dout, &mut g[local(Role::B2)]);
            matmul_at_acc(act, dout, &mut g[local(Role::W2)], t, m, d);
        }
        let mut dpre = vec![0.0; t * m];
        matmul_bt_acc(dout, p(Role::W2), &mut dpre, t, m, d);
        for (dp, &x) in dpre.iter_mut().zip(pre) {
            *dp *= gelu_grad(x);
        }
        if let Some(g) = g.as_deref_mut() {
            sum_rows_acc(&dpre, &mut g[local(Role::B1)]);
            matmul_at_acc(ln, &dpre, &mut g[local(Role::W1)], t, d, m);
        }
        let mut dln = vec![0.0; t * d];
        matmul_bt_acc(&dpre, p(Role::W1), &mut dln, t, d, m);
        match g {
            Some(g) => {
                let (gg, gb) = g[local(Role::LnGain).start..local(Role::LnBias).end].split_at_mut(d);
                layer_norm_backward(&dln, xhat, rstd, p(Role::LnGain), Some(gg), Some(gb))
            }
            None => layer_norm_backward(&dln, xhat, rstd, p(Role::LnGain), None, None),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ModelConfig;

    fn toy(seed: u64, scope: EdgeScope, mode: ProbMode) -> ModelState {
        let cfg = ModelConfig {
            width: 16,
            heads: 4,
            mlp_width: 32,
            vocab_size: 12,
            max_seq_len: 8,
            seed,
            init_std: 0.3,
            edge_scope: scope,
            prob_mode: mode,
            ..Default::default()
        };
        ModelState::init(cfg).unwrap()
    }

    fn tokens(seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..6).map(|_| rng.gen_range(0..12)).collect()
    }

    fn check_fd(mode: ProbMode) {
        for seed in 0..3 {
            let s = toy(seed, EdgeScope::AnswerPosition, mode);
            let toks = tokens(seed + 10);
            let mut g = vec![0.0; s.num_params()];
            s.loss_grad(&toks, &mut g, |r| r.nll(Answer::Yes)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in s.layout().tensors() {
                for _ in 0..4 {
                    let i = t.offset + rng.gen_range(0..t.len());
                    let h = 1e-5;
                    let eval = |delta: f64| {
                        let mut p = s.clone();
                        p.params[i] += delta;
                        p.forward(&toks, RecordLevel::None).unwrap().nll(Answer::Yes).0
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let err = (fd - g[i]).abs();
                    assert!(err <= 1e-4 * fd.abs().max(g[i].abs()) + 1e-9, "{}: fd {fd} vs {}", t.name, g[i]);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_fd(ProbMode::Restricted);
        check_fd(ProbMode::Full);
    }

    #[test]
    fn node_grads_match_finite_differences() {
        let s = toy(3, EdgeScope::AnswerPosition, ProbMode::Restricted);
        let toks = tokens(4);
        let rec = s.forward(&toks, RecordLevel::MessagesAndGrads).unwrap();
        let d = s.config().width;
        for e in 0..s.dag().num_edges() {
            let m = rec.message(e).unwrap().to_vec();
            let v = s.dag().edges()[e].1;
            let grad = &rec.node_grads.as_ref().unwrap()[v];
            // Perturb a single edge message along a unit direction.
            let j = e % d;
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut msg = m.clone();
                msg[j] += delta;
                let mut p = Patch::new();
                p.set(e, msg);
                s.intervene_forward(&toks, &p, RecordLevel::None).unwrap().delta
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - grad[j]).abs() <= 1e-4 * fd.abs().max(grad[j].abs()) + 1e-9, "edge {e}");
        }
    }

    #[test]
    fn recording_is_observation_only() {
        for scope in [EdgeScope::AnswerPosition, EdgeScope::AllPositions] {
            let s = toy(1, scope, ProbMode::Restricted);
            let toks = tokens(2);
            let a = s.forward(&toks, RecordLevel::None).unwrap();
            let b = s.forward(&toks, RecordLevel::Messages).unwrap();
            let c = s.forward(&toks, RecordLevel::MessagesAndGrads).unwrap();
            assert_eq!(a.answer_logits, b.answer_logits);
            assert_eq!(a.answer_logits, c.answer_logits);
        }
    }

    #[test]
    fn node_inputs_are_sums_of_messages() {
        for scope in [EdgeScope::AnswerPosition, EdgeScope::AllPositions] {
            let s = toy(5, scope, ProbMode::Restricted);
            let rec = s.forward(&tokens(6), RecordLevel::Messages).unwrap();
            let inputs = rec.node_inputs.as_ref().unwrap();
            for v in 1..s.dag().num_nodes() {
                let mut sum = vec![0.0; inputs[v].len()];
                for &e in s.dag().incoming(v) {
                    for (a, b) in sum.iter_mut().zip(rec.message(e).unwrap()) {
                        *a += b;
                    }
                }
                let err = sum.iter().zip(&inputs[v]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-10);
            }
        }
    }

    #[test]
    fn empty_patch_matches_forward() {
        let s = toy(2, EdgeScope::AnswerPosition, ProbMode::Restricted);
        let toks = tokens(3);
        let a = s.forward(&toks, RecordLevel::Messages).unwrap();
        let b = s.intervene_forward(&toks, &Patch::new(), RecordLevel::Messages).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cutting_everything_but_embedding_into_logits() {
        let s = toy(4, EdgeScope::AnswerPosition, ProbMode::Restricted);
        let toks = tokens(9);
        let base = s.forward(&toks, RecordLevel::Messages).unwrap();
        let d = s.config().width;
        let logits = s.dag().logits();
        let mut patch = Patch::new();
        for &e in s.dag().incoming(logits) {
            if s.dag().edges()[e].0 != 0 {
                patch.zero(e, d);
            }
        }
        let cut = s.intervene_forward(&toks, &patch, RecordLevel::None).unwrap();
        // Direct embedding-only readout.
        let emb = base.node_outputs.as_ref().unwrap()[0].clone();
        let (direct, _) = s.logits_forward(logits, &emb);
        let diff = direct.iter().zip(&cut.answer_logits).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn unknown_edge_rejected() {
        let s = toy(0, EdgeScope::AnswerPosition, ProbMode::Restricted);
        let mut p = Patch::new();
        p.zero(10_000, 16);
        assert!(matches!(s.intervene_forward(&tokens(0), &p, RecordLevel::None), Err(Error::UnknownEdge(_))));
    }

    #[test]
    fn sequence_length_checked() {
        let s = toy(0, EdgeScope::AnswerPosition, ProbMode::Restricted);
        assert!(matches!(s.forward(&[1; 9], RecordLevel::None), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(s.forward(&[99], RecordLevel::None), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn probabilities_in_range() {
        let cfg = ModelConfig { width: 16, heads: 4, mlp_width: 32, vocab_size: 12, max_seq_len: 8, ..Default::default() };
        let s = ModelState::init(cfg).unwrap();
        let r = s.forward(&tokens(1), RecordLevel::None).unwrap();
        assert!(r.p_yes > 0.0 && r.p_yes < 1.0);
        assert!((r.p_yes + r.p_no - 1.0).abs() < 1e-12);
        assert!(r.delta.abs() < 0.5);
        let (l, _) = ForwardRecord { answer_logits: vec![0.0; 12], ..r }.nll(Answer::Yes);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn pass_counter_tracks_work() {
        let s = toy(0, EdgeScope::AnswerPosition, ProbMode::Restricted);
        reset_pass_counts();
        s.forward(&tokens(0), RecordLevel::MessagesAndGrads).unwrap();
        assert_eq!(pass_counts(), PassCounts { forward: 1, backward: 1 });
    }
}
