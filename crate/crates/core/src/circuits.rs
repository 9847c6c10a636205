// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy circuit extraction and the parameter partition it induces.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attribution::{EdgeScoreMap, Method};
use crate::error::{Error, Result};
use crate::model::{Dag, DagEdge, Layout, NodeId};

/// Edge subgraph grown from the logits node.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    /// (edge, score) in insertion order.
    pub edges: Vec<(DagEdge, f64)>,
    pub nodes: BTreeSet<NodeId>,
    /// Requested edge budget.
    pub budget: usize,
    pub method: Method,
}

impl Circuit {
    pub fn contains_node(&self, node: NodeId) -> bool {
        self.nodes.contains(&node)
    }

    pub fn edge_set(&self) -> BTreeSet<DagEdge> {
        self.edges.iter().map(|e| e.0).collect()
    }

    /// Checks that every node other than logits feeds some circuit edge.
    pub fn is_connected(&self, dag: &Dag) -> bool {
        let edges = self.edge_set();
        self.nodes.contains(&dag.logits())
            && self
                .nodes
                .iter()
                .filter(|&&n| n != dag.logits())
                .all(|&n| dag.outgoing(n).iter().any(|e| edges.contains(e)))
    }

    /// Union of several circuits (per-sample extraction). Scores of shared
    /// edges keep their maximum.
    pub fn union(circuits: &[Circuit]) -> Result<Circuit> {
        let first = circuits.first().ok_or_else(|| Error::Empty("no circuits to merge".into()))?;
        let mut best: std::collections::BTreeMap<DagEdge, f64> = Default::default();
        let mut nodes = BTreeSet::new();
        for c in circuits {
            nodes.extend(c.nodes.iter().copied());
            for &(e, s) in &c.edges {
                let slot = best.entry(e).or_insert(s);
                *slot = slot.max(s);
            }
        }
        Ok(Circuit {
            edges: best.into_iter().collect(),
            nodes,
            budget: circuits.iter().map(|c| c.budget).max().unwrap_or(0),
            method: first.method,
        })
    }

    pub fn to_json(&self, dag: &Dag) -> Result<String> {
        let dump = CircuitDump {
            edges: self
                .edges
                .iter()
                .map(|&(e, score)| {
                    let (a, b) = dag.edges()[e];
                    DumpEdge { from: dag.node_name(a), to: dag.node_name(b), score }
                })
                .collect(),
            nodes: self.nodes.iter().map(|&n| dag.node_name(n)).collect(),
            budget: self.budget,
            method: self.method,
        };
        Ok(serde_json::to_string_pretty(&dump)?)
    }

    pub fn from_json(dag: &Dag, json: &str) -> Result<Self> {
        let dump: CircuitDump = serde_json::from_str(json)?;
        let mut edges = Vec::with_capacity(dump.edges.len());
        for e in &dump.edges {
            let key = format!("{}→{}", e.from, e.to);
            let id = dag.edge_by_key(&key).ok_or(Error::UnknownEdge(key))?;
            edges.push((id, e.score));
        }
        let nodes = dump
            .nodes
            .iter()
            .map(|n| dag.node_by_name(n).ok_or_else(|| Error::Config(format!("unknown node {n:?} in circuit dump"))))
            .collect::<Result<_>>()?;
        Ok(Self { edges, nodes, budget: dump.budget, method: dump.method })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpEdge {
    from: String,
    to: String,
    score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CircuitDump {
    edges: Vec<DumpEdge>,
    nodes: Vec<String>,
    budget: usize,
    method: Method,
}

/// ⌈fraction · total⌉, clamped to at least one edge.
pub fn budget_from_fraction(total_edges: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("circuit fraction must lie in (0, 1], got {fraction}")));
    }
    // The slack keeps 0.05 · 100 at 5 despite representation error.
    let b = (fraction * total_edges as f64 - 1e-9).ceil() as usize;
    Ok(b.clamp(1, total_edges.max(1)))
}

struct Frontier<'a> {
    edge: DagEdge,
    score: f64,
    key: &'a str,
}

impl PartialEq for Frontier<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier<'_> {}

impl PartialOrd for Frontier<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier<'_> {
    // Max-heap: higher score first, then the lexicographically smaller key.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.key.cmp(self.key))
    }
}

/// Grows a circuit from the logits node by repeatedly taking the best edge
/// whose downstream endpoint is already inside.
pub fn greedy_extract(dag: &Dag, scores: &EdgeScoreMap, budget: usize) -> Result<Circuit> {
    if budget == 0 {
        return Err(Error::Config("circuit budget must be at least 1".into()));
    }
    if scores.len() != dag.num_edges() {
        return Err(Error::Attribution(format!(
            "score map has {} edges, model has {}",
            scores.len(),
            dag.num_edges()
        )));
    }
    if let Some(e) = scores.scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score of edge {}", dag.edge_key(e))));
    }
    let keys: Vec<String> = (0..dag.num_edges()).map(|e| dag.edge_key(e)).collect();
    let mut nodes = BTreeSet::from([dag.logits()]);
    let mut heap: BinaryHeap<Frontier> = dag
        .incoming(dag.logits())
        .iter()
        .map(|&e| Frontier { edge: e, score: scores.scores[e], key: &keys[e] })
        .collect();
    let mut edges = Vec::new();
    while edges.len() < budget {
        let Some(top) = heap.pop() else {
            log::warn!("circuit budget {budget} exceeds the {} admissible edges; taking all", edges.len());
            break;
        };
        edges.push((top.edge, top.score));
        let parent = dag.edges()[top.edge].0;
        if nodes.insert(parent) {
            heap.extend(
                dag.incoming(parent).iter().map(|&e| Frontier { edge: e, score: scores.scores[e], key: &keys[e] }),
            );
        }
    }
    Ok(Circuit { edges, nodes, budget, method: scores.method })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Forget,
    Retain,
    Shared,
    Untouched,
}

/// Node-level assignment of parameters to update groups. Embedding and
/// unembedding (the input and logits nodes) are always untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPartition {
    pub forget: Vec<NodeId>,
    pub retain: Vec<NodeId>,
    pub shared: Vec<NodeId>,
    pub untouched: Vec<NodeId>,
}

impl ParameterPartition {
    pub fn nodes(&self, group: Group) -> &[NodeId] {
        match group {
            Group::Forget => &self.forget,
            Group::Retain => &self.retain,
            Group::Shared => &self.shared,
            Group::Untouched => &self.untouched,
        }
    }

    pub fn group_of(&self, node: NodeId) -> Group {
        [Group::Forget, Group::Retain, Group::Shared]
            .into_iter()
            .find(|&g| self.nodes(g).contains(&node))
            .unwrap_or(Group::Untouched)
    }

    /// Flat parameter ranges of a group (node ranges are contiguous).
    pub fn ranges(&self, layout: &Layout, group: Group) -> Vec<Range<usize>> {
        self.nodes(group).iter().map(|&n| layout.node_range(n)).collect()
    }

    pub fn param_count(&self, layout: &Layout, group: Group) -> usize {
        self.ranges(layout, group).iter().map(|r| r.len()).sum()
    }

    /// Forget, retain, and shared nodes together.
    pub fn trainable(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.forget.iter().chain(&self.retain).chain(&self.shared).copied().collect();
        v.sort_unstable();
        v
    }
}

pub fn partition(dag: &Dag, forget: &Circuit, retain: &Circuit) -> ParameterPartition {
    let mut p = ParameterPartition { forget: vec![], retain: vec![], shared: vec![], untouched: vec![] };
    for n in 0..dag.num_nodes() {
        let (f, r) = (forget.contains_node(n), retain.contains_node(n));
        let slot = if n == dag.input() || n == dag.logits() {
            &mut p.untouched
        } else {
            match (f, r) {
                (true, false) => &mut p.forget,
                (false, true) => &mut p.retain,
                (true, true) => &mut p.shared,
                (false, false) => &mut p.untouched,
            }
        };
        slot.push(n);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(scores: Vec<f64>) -> EdgeScoreMap {
        EdgeScoreMap { method: Method::Intervention, samples: 1, signed: scores.clone(), scores }
    }

    fn circuit_of(dag: &Dag, names: &[&str]) -> Circuit {
        let nodes = names.iter().map(|n| dag.node_by_name(n).unwrap()).collect();
        Circuit { edges: vec![], nodes, budget: 0, method: Method::Intervention }
    }

    #[test]
    fn budget_one_takes_best_logits_edge() {
        let dag = Dag::new(2, 4);
        let scores: Vec<f64> = (0..dag.num_edges()).map(|e| (e * 7 % 13) as f64).collect();
        let c = greedy_extract(&dag, &map(scores.clone()), 1).unwrap();
        let best = *dag.incoming(dag.logits()).iter().max_by(|&&a, &&b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a))).unwrap();
        assert_eq!(c.edges, vec![(best, scores[best])]);
    }

    #[test]
    fn ties_break_on_edge_key() {
        let dag = Dag::new(2, 4);
        let c = greedy_extract(&dag, &map(vec![1.0; dag.num_edges()]), 3).unwrap();
        let mut keys: Vec<String> = dag.incoming(dag.logits()).iter().map(|&e| dag.edge_key(e)).collect();
        keys.sort();
        assert_eq!(dag.edge_key(c.edges[0].0), keys[0]);
    }

    #[test]
    fn over_budget_returns_everything() {
        let dag = Dag::new(1, 2);
        let c = greedy_extract(&dag, &map(vec![0.5; dag.num_edges()]), 1000).unwrap();
        assert_eq!(c.edges.len(), dag.num_edges());
        assert!(c.is_connected(&dag));
    }

    #[test]
    fn rejects_zero_budget_and_nan() {
        let dag = Dag::new(1, 1);
        assert!(greedy_extract(&dag, &map(vec![1.0; dag.num_edges()]), 0).is_err());
        let mut s = vec![1.0; dag.num_edges()];
        s[0] = f64::NAN;
        assert!(greedy_extract(&dag, &map(s), 1).is_err());
    }

    #[test]
    fn fraction_budgets() {
        assert_eq!(budget_from_fraction(100, 0.05).unwrap(), 5);
        assert_eq!(budget_from_fraction(33, 0.05).unwrap(), 2);
        assert_eq!(budget_from_fraction(54, 1.0).unwrap(), 54);
        assert!(budget_from_fraction(10, 0.0).is_err());
        assert!(budget_from_fraction(10, 1.5).is_err());
    }

    #[test]
    fn partition_fixture_counts() {
        let dag = Dag::new(2, 4);
        let f = circuit_of(&dag, &["L2.logits0", "L0.head0", "L0.head1", "L0.mlp0", "L1.head0", "L1.head1"]);
        let r = circuit_of(&dag, &["L2.logits0", "L0.head0", "L0.mlp0", "L1.head1", "L1.head2", "L1.head3", "L1.mlp0"]);
        let p = partition(&dag, &f, &r);
        assert_eq!((p.forget.len(), p.retain.len(), p.shared.len()), (2, 3, 3));
        assert!(p.untouched.contains(&dag.input()) && p.untouched.contains(&dag.logits()));
    }

    #[test]
    fn identical_and_disjoint_circuits() {
        let dag = Dag::new(2, 4);
        let a = circuit_of(&dag, &["L2.logits0", "L0.head0", "L1.mlp0"]);
        let p = partition(&dag, &a, &a);
        assert!(p.forget.is_empty() && p.retain.is_empty());
        assert_eq!(p.shared.len(), 2);
        let b = circuit_of(&dag, &["L2.logits0", "L0.head1", "L1.head2"]);
        assert!(partition(&dag, &a, &b).shared.is_empty());
    }

    #[test]
    fn dump_round_trip() {
        let dag = Dag::new(2, 4);
        let scores: Vec<f64> = (0..dag.num_edges()).map(|e| 1.0 / (e as f64 + 1.0)).collect();
        let c = greedy_extract(&dag, &map(scores), 6).unwrap();
        let back = Circuit::from_json(&dag, &c.to_json(&dag).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
