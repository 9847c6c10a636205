// SPDX-License-Identifier: MIT OR Apache-2.0

//! Retain-buffer selection by proximity to the forget set.

use std::collections::BTreeSet;

use super::{push_ppr, PprConfig, PprGraph};
use crate::error::{Error, Result};
use crate::interactions::{ItemId, UserId};

/// Ranks `pool` interactions by π(u) + π(i), with π pushed from a uniform
/// preference over every endpoint of the forget set, and returns the indices
/// of the top `k·|forget|` (all of them, with a warning, when the pool is
/// smaller). Ties keep pool order.
pub fn select_retain_buffer(
    graph: &PprGraph,
    forget: &[(UserId, ItemId)],
    pool: &[(UserId, ItemId)],
    k: usize,
    config: &PprConfig,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("retain multiplier k must be >= 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::Split("retain pool is empty".into()));
    }
    if forget.is_empty() {
        return Err(Error::Split("forget set is empty".into()));
    }
    let sources: BTreeSet<usize> =
        forget.iter().flat_map(|&(u, i)| [graph.user_node(u), graph.item_node(i)]).collect();
    let w = 1.0 / sources.len() as f64;
    let preference: Vec<(usize, f64)> = sources.into_iter().map(|n| (n, w)).collect();
    let pi = push_ppr(graph, &preference, config)?;
    let mut want = k * forget.len();
    if want > pool.len() {
        log::warn!("retain buffer of {want} exceeds the retain pool of {}; taking all", pool.len());
        want = pool.len();
    }
    let scores: Vec<f64> = pool.iter().map(|&(u, i)| pi.get(graph.user_node(u)) + pi.get(graph.item_node(i))).collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(want);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_size_is_k_times_forget() {
        // 4 users × 4 items, fully connected.
        let nu = 4;
        let edges: Vec<(usize, usize)> = (0..4).flat_map(|u| (0..4).map(move |i| (u, nu + i))).collect();
        let g = PprGraph::from_edges(nu, 8, &edges);
        let pool: Vec<(u32, u32)> = (0..4).flat_map(|u| (0..4).map(move |i| (u, i))).skip(1).collect();
        let sel = select_retain_buffer(&g, &[(0, 0)], &pool, 6, &PprConfig::default()).unwrap();
        assert_eq!(sel.len(), 6);
        let capped = select_retain_buffer(&g, &[(0, 0), (1, 1), (2, 2)], &pool, 6, &PprConfig::default()).unwrap();
        assert_eq!(capped.len(), pool.len());
    }

    #[test]
    fn nearby_component_first() {
        // Component A: user 0 – items 0, 1. Component B: users 1, 2 – items 2, 3.
        let nu = 3;
        let g = PprGraph::from_edges(nu, 7, &[(0, 3), (0, 4), (1, 5), (2, 5), (2, 6), (1, 6)]);
        let pool = vec![(1, 2), (2, 3), (0, 1), (1, 3)];
        let sel = select_retain_buffer(&g, &[(0, 0)], &pool, 1, &PprConfig::default()).unwrap();
        assert_eq!(sel, vec![2]);
    }
}
