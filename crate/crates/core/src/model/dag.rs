// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge-level view of the residual stream.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub type NodeId = usize;
pub type DagEdge = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Input,
    Head(usize),
    Mlp,
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Node {
    pub layer: usize,
    pub kind: NodeKind,
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NodeKind::Input => write!(f, "L{}.emb0", self.layer),
            NodeKind::Head(h) => write!(f, "L{}.head{}", self.layer, h),
            NodeKind::Mlp => write!(f, "L{}.mlp0", self.layer),
            NodeKind::Logits => write!(f, "L{}.logits0", self.layer),
        }
    }
}

/// Nodes in topological order and every residual edge between them.
///
/// Heads of a layer read the stream before that layer; the MLP of a layer
/// also reads that layer's heads; the logits node reads everything.
#[derive(Debug, Clone, PartialEq)]
pub struct Dag {
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId)>,
    incoming: Vec<Vec<DagEdge>>,
    outgoing: Vec<Vec<DagEdge>>,
    edge_index: HashMap<String, DagEdge>,
}

impl Dag {
    pub fn new(layers: usize, heads: usize) -> Self {
        let mut nodes = vec![Node { layer: 0, kind: NodeKind::Input }];
        for layer in 0..layers {
            nodes.extend((0..heads).map(|h| Node { layer, kind: NodeKind::Head(h) }));
            nodes.push(Node { layer, kind: NodeKind::Mlp });
        }
        nodes.push(Node { layer: layers, kind: NodeKind::Logits });

        let mut edges = Vec::new();
        for (v, node) in nodes.iter().enumerate() {
            let preds: Vec<NodeId> = match node.kind {
                NodeKind::Input => Vec::new(),
                NodeKind::Head(_) => (0..v).filter(|&u| u == 0 || nodes[u].layer < node.layer).collect(),
                NodeKind::Mlp | NodeKind::Logits => (0..v).collect(),
            };
            edges.extend(preds.into_iter().map(|u| (u, v)));
        }
        let mut incoming = vec![Vec::new(); nodes.len()];
        let mut outgoing = vec![Vec::new(); nodes.len()];
        for (e, &(u, v)) in edges.iter().enumerate() {
            outgoing[u].push(e);
            incoming[v].push(e);
        }
        let edge_index = edges.iter().enumerate().map(|(e, &(u, v))| (format!("{}→{}", nodes[u], nodes[v]), e)).collect();
        Self { nodes, edges, incoming, outgoing, edge_index }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn logits(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn incoming(&self, node: NodeId) -> &[DagEdge] {
        &self.incoming[node]
    }

    pub fn outgoing(&self, node: NodeId) -> &[DagEdge] {
        &self.outgoing[node]
    }

    pub fn edge_key(&self, edge: DagEdge) -> String {
        let (u, v) = self.edges[edge];
        format!("{}→{}", self.nodes[u], self.nodes[v])
    }

    pub fn node_name(&self, node: NodeId) -> String {
        self.nodes[node].to_string()
    }

    pub fn edge_by_key(&self, key: &str) -> Option<DagEdge> {
        self.edge_index.get(key).copied()
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.to_string() == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_and_edge_counts() {
        let dag = Dag::new(2, 4);
        assert_eq!(dag.num_nodes(), 12);
        // 4·1 + 5 + 4·6 + 10 + 11
        assert_eq!(dag.num_edges(), 54);
    }

    #[test]
    fn edges_point_forward() {
        let dag = Dag::new(3, 2);
        assert!(dag.edges().iter().all(|&(u, v)| u < v));
        assert!(dag.outgoing(dag.logits()).is_empty());
        assert!(dag.incoming(dag.input()).is_empty());
    }

    #[test]
    fn keys_round_trip() {
        let dag = Dag::new(2, 4);
        for e in 0..dag.num_edges() {
            assert_eq!(dag.edge_by_key(&dag.edge_key(e)), Some(e));
        }
        assert_eq!(dag.edge_key(0), "L0.emb0→L0.head0");
        assert_eq!(dag.node_name(dag.logits()), "L2.logits0");
    }
}
