// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small pre-LN decoder with a hand-written backward pass and an explicit
//! residual-edge DAG.

mod checkpoint;
mod dag;
mod forward;
mod ops;
mod train;

use std::fmt;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use dag::{Dag, DagEdge, Node, NodeId, NodeKind};
pub use forward::{pass_counts, reset_pass_counts, ForwardRecord, Patch, PassCounts};
pub use train::{batch_loss_grad, predict, train, EpochLog, LrSchedule, TrainConfig, TrainReport};

use crate::error::{Error, Result};

/// How P(Yes) and P(No) are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbMode {
    /// Softmax over the two answer logits only.
    #[default]
    Restricted,
    /// Full-vocabulary softmax.
    Full,
}

/// Token positions at which edge messages and node gradients are recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeScope {
    #[default]
    AnswerPosition,
    AllPositions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordLevel {
    #[default]
    None,
    Messages,
    MessagesAndGrads,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_width: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub init_std: f64,
    pub prob_mode: ProbMode,
    pub edge_scope: EdgeScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 64,
            mlp_width: 256,
            vocab_size: 0,
            max_seq_len: 32,
            seed: 1,
            init_std: 0.02,
            prob_mode: ProbMode::Restricted,
            edge_scope: EdgeScope::AnswerPosition,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.mlp_width == 0 {
            return bad("model.layers, model.heads, model.width and model.mlp_width must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("model.width {} is not divisible by model.heads {}", self.width, self.heads));
        }
        if self.vocab_size < 4 {
            return bad(format!("model.vocab_size {} too small for the special tokens", self.vocab_size));
        }
        if self.max_seq_len == 0 {
            return bad("model.max_seq_len must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad(format!("model.init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TokEmb,
    PosEmb,
    LnGain,
    LnBias,
    Wq,
    Bq,
    Wk,
    Bk,
    Wv,
    Bv,
    Wo,
    Bo,
    W1,
    B1,
    W2,
    B2,
    Unembed,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::TokEmb => "tok",
            Role::PosEmb => "pos",
            Role::LnGain => "ln_g",
            Role::LnBias => "ln_b",
            Role::Wq => "wq",
            Role::Bq => "bq",
            Role::Wk => "wk",
            Role::Bk => "bk",
            Role::Wv => "wv",
            Role::Bv => "bv",
            Role::Wo => "wo",
            Role::Bo => "bo",
            Role::W1 => "w1",
            Role::B1 => "b1",
            Role::W2 => "w2",
            Role::B2 => "b2",
            Role::Unembed => "unembed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamKey {
    pub node: NodeId,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub key: ParamKey,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Where each named tensor lives in the flat parameter vector. Tensors of a
/// node are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    node_tensors: Vec<Range<usize>>,
    total: usize,
}

impl Layout {
    fn new(config: &ModelConfig, dag: &Dag) -> Self {
        let (d, dh, m, v) = (config.width, config.head_dim(), config.mlp_width, config.vocab_size);
        let mut tensors = Vec::new();
        let mut node_tensors = Vec::new();
        let mut offset = 0;
        for (id, node) in dag.nodes().iter().enumerate() {
            let roles: Vec<(Role, Vec<usize>)> = match node.kind {
                NodeKind::Input => vec![(Role::TokEmb, vec![v, d]), (Role::PosEmb, vec![config.max_seq_len, d])],
                NodeKind::Head(_) => vec![
                    (Role::LnGain, vec![d]),
                    (Role::LnBias, vec![d]),
                    (Role::Wq, vec![d, dh]),
                    (Role::Bq, vec![dh]),
                    (Role::Wk, vec![d, dh]),
                    (Role::Bk, vec![dh]),
                    (Role::Wv, vec![d, dh]),
                    (Role::Bv, vec![dh]),
                    (Role::Wo, vec![dh, d]),
                    (Role::Bo, vec![d]),
                ],
                NodeKind::Mlp => vec![
                    (Role::LnGain, vec![d]),
                    (Role::LnBias, vec![d]),
                    (Role::W1, vec![d, m]),
                    (Role::B1, vec![m]),
                    (Role::W2, vec![m, d]),
                    (Role::B2, vec![d]),
                ],
                NodeKind::Logits => {
                    vec![(Role::LnGain, vec![d]), (Role::LnBias, vec![d]), (Role::Unembed, vec![d, v])]
                }
            };
            let start = tensors.len();
            for (role, shape) in roles {
                let spec = TensorSpec { key: ParamKey { node: id, role }, name: format!("{node}.{role}"), shape, offset };
                offset += spec.len();
                tensors.push(spec);
            }
            node_tensors.push(start..tensors.len());
        }
        Self { tensors, node_tensors, total: offset }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn node_tensors(&self, node: NodeId) -> &[TensorSpec] {
        &self.tensors[self.node_tensors[node].clone()]
    }

    /// Flat index range covering every parameter of `node`.
    pub fn node_range(&self, node: NodeId) -> Range<usize> {
        let t = self.node_tensors(node);
        t[0].offset..t[t.len() - 1].range().end
    }

    pub fn spec(&self, key: ParamKey) -> &TensorSpec {
        self.node_tensors(key.node)
            .iter()
            .find(|t| t.key.role == key.role)
            .unwrap_or_else(|| panic!("no tensor {:?} on node {}", key.role, key.node))
    }

    pub fn range(&self, node: NodeId, role: Role) -> Range<usize> {
        self.spec(ParamKey { node, role }).range()
    }
}

/// Configuration plus the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    dag: Dag,
    layout: Layout,
    pub params: Vec<f64>,
}

impl ModelState {
    /// Seeded initialisation: normal weights, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let mut state = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed);
        let normal = Normal::new(0.0, state.config.init_std).expect("validated std");
        for spec in &state.layout.tensors {
            let slot = &mut state.params[spec.range()];
            match spec.key.role {
                Role::LnGain => slot.fill(1.0),
                Role::LnBias | Role::Bq | Role::Bk | Role::Bv | Role::Bo | Role::B1 | Role::B2 => slot.fill(0.0),
                _ => slot.iter_mut().for_each(|x| *x = normal.sample(&mut rng)),
            }
        }
        Ok(state)
    }

    pub(crate) fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let dag = Dag::new(config.layers, config.heads);
        let layout = Layout::new(&config, &dag);
        let params = vec![0.0; layout.total()];
        Ok(Self { config, dag, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let mut s = Self::zeros(config)?;
        if params.len() != s.params.len() {
            return Err(Error::Format {
                path: Default::default(),
                message: format!("expected {} parameters, got {}", s.params.len(), params.len()),
            });
        }
        s.params = params;
        Ok(s)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, node: NodeId, role: Role) -> &[f64] {
        &self.params[self.layout.range(node, role)]
    }

    pub fn param_keys(&self) -> Vec<ParamKey> {
        self.layout.tensors.iter().map(|t| t.key).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.layout
            .tensors
            .iter()
            .find(|t| self.params[t.range()].iter().any(|x| !x.is_finite()))
            .map(|t| t.name.as_str())
    }
}
