// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward-push personalized PageRank on the user–item graph.
//!
//! Solves π = a·Pᵀπ + (1−a)·p with P the row-stochastic neighbour walk. Under
//! the default convention a = α; [`Convention::Swapped`] uses a = 1 − α.

mod buffer;
mod cache;
mod corrupt;

pub use buffer::select_retain_buffer;
pub use cache::{ItemPprCache, PPR_CACHE_MAGIC};
pub use corrupt::{build_corrupt_sample, combine_ppr, item_importance, CorruptCandidate, CorruptConfig};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interactions::{hex_digest, EdgeId, InteractionGraph, ItemId, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// α weights the walk, 1 − α the restart.
    #[default]
    Literal,
    /// α weights the restart.
    Swapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PprConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub convention: Convention,
}

impl Default for PprConfig {
    fn default() -> Self {
        Self { alpha: 0.85, epsilon: 1e-6, tau: 1.0, convention: Convention::Literal }
    }
}

impl PprConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("ppr.alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("ppr.epsilon must be positive, got {}", self.epsilon)));
        }
        if !self.tau.is_finite() {
            return Err(Error::Config("ppr.tau must be finite".into()));
        }
        Ok(())
    }

    /// (walk weight, restart weight)
    pub fn weights(&self) -> (f64, f64) {
        match self.convention {
            Convention::Literal => (self.alpha, 1.0 - self.alpha),
            Convention::Swapped => (1.0 - self.alpha, self.alpha),
        }
    }
}

/// Undirected graph with users at `0..num_users` and items after them.
#[derive(Debug, Clone, PartialEq)]
pub struct PprGraph {
    num_users: usize,
    adjacency: Vec<Vec<u32>>,
}

impl PprGraph {
    /// Graph over the given interactions (typically positive training edges).
    pub fn from_interactions(graph: &InteractionGraph, edges: &[EdgeId]) -> Self {
        let nu = graph.num_users();
        let pairs: Vec<(usize, usize)> = edges
            .iter()
            .map(|&e| {
                let x = graph.edges()[e];
                (x.user as usize, nu + x.item as usize)
            })
            .collect();
        Self::from_edges(nu, nu + graph.num_items(), &pairs)
    }

    pub fn from_edges(num_users: usize, num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(a, b) in edges {
            adjacency[a].push(b as u32);
            adjacency[b].push(a as u32);
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        Self { num_users, adjacency }
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.adjacency.len() - self.num_users
    }

    pub fn user_node(&self, user: UserId) -> usize {
        user as usize
    }

    pub fn item_node(&self, item: ItemId) -> usize {
        self.num_users + item as usize
    }

    pub fn neighbors(&self, node: usize) -> &[u32] {
        &self.adjacency[node]
    }

    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(self.num_users as u64).to_le_bytes());
        for list in &self.adjacency {
            bytes.extend_from_slice(&(list.len() as u64).to_le_bytes());
            for &v in list {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        hex_digest(&bytes)
    }
}

/// Sparse approximate PPR solution.
#[derive(Debug, Clone, PartialEq)]
pub struct PprVector {
    /// (node, mass) sorted by node; zero entries omitted.
    pub entries: Vec<(u32, f64)>,
    pub alpha: f64,
    pub epsilon: f64,
    /// Residual mass left unpushed at termination.
    pub residual: f64,
    /// Mass that walked into nodes without neighbours.
    pub lost: f64,
    pub pushes: usize,
}

impl PprVector {
    pub fn get(&self, node: usize) -> f64 {
        self.entries.binary_search_by_key(&(node as u32), |e| e.0).map(|i| self.entries[i].1).unwrap_or(0.0)
    }

    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for &(k, v) in &self.entries {
            out[k as usize] = v;
        }
        out
    }

    fn from_dense(dense: &[f64], config: &PprConfig, residual: f64, lost: f64, pushes: usize) -> Self {
        let entries = dense.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(k, &v)| (k as u32, v)).collect();
        Self { entries, alpha: config.alpha, epsilon: config.epsilon, residual, lost, pushes }
    }
}

/// Forward push from `preference` (node, weight) pairs. Nodes are pushed in
/// FIFO order while their residual is at least ε, so every residual is below
/// ε on return.
pub fn push_ppr(graph: &PprGraph, preference: &[(usize, f64)], config: &PprConfig) -> Result<PprVector> {
    config.validate()?;
    let n = graph.num_nodes();
    let (walk, restart) = config.weights();
    let mut pi = vec![0.0; n];
    let mut r = vec![0.0; n];
    for &(node, w) in preference {
        if node >= n {
            return Err(Error::Config(format!("preference node {node} outside graph of {n} nodes")));
        }
        if w < 0.0 {
            return Err(Error::Config("preference weights must be non-negative".into()));
        }
        r[node] += w;
    }
    let mut queued = vec![false; n];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (u, &ru) in r.iter().enumerate() {
        if ru >= config.epsilon {
            queue.push_back(u);
            queued[u] = true;
        }
    }
    let mut lost = 0.0;
    let mut pushes = 0;
    while let Some(u) = queue.pop_front() {
        queued[u] = false;
        let ru = r[u];
        if ru < config.epsilon {
            continue;
        }
        r[u] = 0.0;
        pi[u] += restart * ru;
        pushes += 1;
        let nb = graph.neighbors(u);
        if nb.is_empty() {
            lost += walk * ru;
            continue;
        }
        let share = walk * ru / nb.len() as f64;
        for &v in nb {
            let v = v as usize;
            r[v] += share;
            if !queued[v] && r[v] >= config.epsilon {
                queued[v] = true;
                queue.push_back(v);
            }
        }
    }
    let residual = r.iter().sum();
    Ok(PprVector::from_dense(&pi, config, residual, lost, pushes))
}

/// One-hot push from a single node.
pub fn push_from(graph: &PprGraph, node: usize, config: &PprConfig) -> Result<PprVector> {
    push_ppr(graph, &[(node, 1.0)], config)
}
