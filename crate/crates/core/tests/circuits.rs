// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use circuit_unlearn::attribution::{EdgeScoreMap, Method};
use circuit_unlearn::circuits::{greedy_extract, partition, Circuit, Group};
use circuit_unlearn::model::Dag;
use proptest::prelude::*;

fn map(scores: Vec<f64>) -> EdgeScoreMap {
    EdgeScoreMap { method: Method::Intervention, samples: 1, signed: scores.clone(), scores }
}

/// Quadratic replay: scan every edge each round, no heap.
fn brute_force(dag: &Dag, scores: &[f64], budget: usize) -> Vec<usize> {
    let mut in_circuit = BTreeSet::from([dag.logits()]);
    let mut taken: Vec<usize> = Vec::new();
    while taken.len() < budget {
        let mut best: Option<usize> = None;
        for e in 0..dag.num_edges() {
            if taken.contains(&e) || !in_circuit.contains(&dag.edges()[e].1) {
                continue;
            }
            best = match best {
                None => Some(e),
                Some(b) => {
                    let better = scores[e] > scores[b] || (scores[e] == scores[b] && dag.edge_key(e) < dag.edge_key(b));
                    Some(if better { e } else { b })
                }
            };
        }
        let Some(e) = best else { break };
        taken.push(e);
        in_circuit.insert(dag.edges()[e].0);
    }
    taken
}

#[test]
fn toy_dag_matches_brute_force_replay() {
    let dag = Dag::new(2, 4);
    assert_eq!(dag.num_nodes(), 12);
    // Coarse values force plenty of ties.
    let scores: Vec<f64> = (0..dag.num_edges()).map(|e| ((e * 37 + 11) % 9) as f64 * 0.25).collect();
    for budget in [1, 3, 5, 10, 27, 54] {
        let c = greedy_extract(&dag, &map(scores.clone()), budget).unwrap();
        let got: Vec<usize> = c.edges.iter().map(|e| e.0).collect();
        assert_eq!(got, brute_force(&dag, &scores, budget), "budget {budget}");
    }
}

fn scores_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![0.0..1.0f64, Just(0.5), Just(0.0)], n)
}

proptest! {
    #[test]
    fn matches_replay_on_random_scores(scores in scores_strategy(54), budget in 1usize..60) {
        let dag = Dag::new(2, 4);
        let c = greedy_extract(&dag, &map(scores.clone()), budget).unwrap();
        let got: Vec<usize> = c.edges.iter().map(|e| e.0).collect();
        prop_assert_eq!(got, brute_force(&dag, &scores, budget));
    }

    #[test]
    fn growth_is_monotone_and_connected(scores in scores_strategy(54), budget in 1usize..54) {
        let dag = Dag::new(2, 4);
        let small = greedy_extract(&dag, &map(scores.clone()), budget).unwrap();
        let big = greedy_extract(&dag, &map(scores), budget + 1).unwrap();
        prop_assert!(small.edge_set().is_subset(&big.edge_set()));
        prop_assert!(small.is_connected(&dag) && big.is_connected(&dag));
    }

    #[test]
    fn partition_is_a_partition(scores_f in scores_strategy(54), scores_r in scores_strategy(54), b in 1usize..30) {
        let dag = Dag::new(2, 4);
        let f = greedy_extract(&dag, &map(scores_f), b).unwrap();
        let r = greedy_extract(&dag, &map(scores_r), b).unwrap();
        let p = partition(&dag, &f, &r);
        let mut all: Vec<usize> = [Group::Forget, Group::Retain, Group::Shared, Group::Untouched]
            .iter()
            .flat_map(|&g| p.nodes(g).to_vec())
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(n, all.len());
        prop_assert_eq!(all, (0..dag.num_nodes()).collect::<Vec<_>>());
    }
}

#[test]
fn union_keeps_every_node() {
    let dag = Dag::new(2, 4);
    let a = greedy_extract(&dag, &map((0..54).map(|e| e as f64).collect()), 4).unwrap();
    let b = greedy_extract(&dag, &map((0..54).map(|e| -(e as f64)).collect()), 4).unwrap();
    let u = Circuit::union(&[a.clone(), b.clone()]).unwrap();
    assert!(a.nodes.is_subset(&u.nodes) && b.nodes.is_subset(&u.nodes));
    assert!(u.is_connected(&dag));
}
