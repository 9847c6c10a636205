// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-item PPR vectors and their on-disk cache.
//!
//! File layout: 8-byte magic, u64 LE index length, JSON index, then one
//! record per item: u32 entry count, f64 residual, f64 lost mass, and
//! (u32 node, f64 mass) pairs. Index offsets are relative to the first record.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{push_from, Convention, PprConfig, PprGraph, PprVector};
use crate::error::{Error, Result};
use crate::interactions::ItemId;

pub const PPR_CACHE_MAGIC: &[u8; 8] = b"PPRCACH1";

#[derive(Debug, Clone, PartialEq)]
pub struct ItemPprCache {
    pub graph_hash: String,
    pub config: PprConfig,
    pub vectors: Vec<PprVector>,
    /// Pushes executed to build this value (zero when loaded from disk).
    pub pushes: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    graph_hash: String,
    alpha: f64,
    epsilon: f64,
    convention: Convention,
    items: BTreeMap<String, u64>,
}

impl ItemPprCache {
    /// One-hot push from every item node.
    pub fn compute(graph: &PprGraph, config: &PprConfig) -> Result<Self> {
        config.validate()?;
        let vectors: Vec<PprVector> = (0..graph.num_items())
            .into_par_iter()
            .map(|i| push_from(graph, graph.item_node(i as ItemId), config))
            .collect::<Result<_>>()?;
        let pushes = vectors.iter().map(|v| v.pushes).sum();
        Ok(Self { graph_hash: graph.content_hash(), config: *config, vectors, pushes })
    }

    pub fn item(&self, item: ItemId) -> &PprVector {
        &self.vectors[item as usize]
    }

    /// Loads `path` when it matches the graph and parameters; otherwise
    /// recomputes and rewrites it.
    pub fn load_or_compute(path: &Path, graph: &PprGraph, config: &PprConfig) -> Result<Self> {
        if path.exists() {
            match Self::load(path) {
                Ok(c)
                    if c.graph_hash == graph.content_hash()
                        && c.config.alpha == config.alpha
                        && c.config.epsilon == config.epsilon
                        && c.config.convention == config.convention =>
                {
                    return Ok(Self { config: *config, ..c });
                }
                Ok(_) => log::info!("ppr cache {} is stale; recomputing", path.display()),
                Err(e) => log::warn!("ignoring unreadable ppr cache {}: {e}", path.display()),
            }
        }
        let c = Self::compute(graph, config)?;
        c.save(path)?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data = Vec::new();
        let mut items = BTreeMap::new();
        for (i, v) in self.vectors.iter().enumerate() {
            items.insert(i.to_string(), data.len() as u64);
            data.extend_from_slice(&(v.entries.len() as u32).to_le_bytes());
            data.extend_from_slice(&v.residual.to_le_bytes());
            data.extend_from_slice(&v.lost.to_le_bytes());
            for &(k, m) in &v.entries {
                data.extend_from_slice(&k.to_le_bytes());
                data.extend_from_slice(&m.to_le_bytes());
            }
        }
        let index = Index {
            graph_hash: self.graph_hash.clone(),
            alpha: self.config.alpha,
            epsilon: self.config.epsilon,
            convention: self.config.convention,
            items,
        };
        let json = serde_json::to_vec(&index)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(PPR_CACHE_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&data)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fail = |m: &str| Error::Format { path: path.to_path_buf(), message: m.to_string() };
        let mut r = BufReader::new(File::open(path)?);
        let mut head = [0u8; 16];
        r.read_exact(&mut head)?;
        if &head[..8] != PPR_CACHE_MAGIC {
            return Err(fail("bad ppr cache magic"));
        }
        let len = u64::from_le_bytes(head[8..].try_into().expect("8 bytes")) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let index: Index = serde_json::from_slice(&json)?;
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let config = PprConfig { alpha: index.alpha, epsilon: index.epsilon, convention: index.convention, ..Default::default() };
        let mut vectors = Vec::with_capacity(index.items.len());
        for i in 0..index.items.len() {
            let off = *index.items.get(&i.to_string()).ok_or_else(|| fail("item missing from index"))? as usize;
            let take = |at: usize, n: usize| data.get(at..at + n).ok_or_else(|| fail("truncated ppr cache"));
            let count = u32::from_le_bytes(take(off, 4)?.try_into().expect("4")) as usize;
            let residual = f64::from_le_bytes(take(off + 4, 8)?.try_into().expect("8"));
            let lost = f64::from_le_bytes(take(off + 12, 8)?.try_into().expect("8"));
            let mut entries = Vec::with_capacity(count);
            for k in 0..count {
                let at = off + 20 + k * 12;
                let node = u32::from_le_bytes(take(at, 4)?.try_into().expect("4"));
                let mass = f64::from_le_bytes(take(at + 4, 8)?.try_into().expect("8"));
                entries.push((node, mass));
            }
            vectors.push(PprVector { entries, alpha: config.alpha, epsilon: config.epsilon, residual, lost, pushes: 0 });
        }
        Ok(Self { graph_hash: index.graph_hash, config, vectors, pushes: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppr::push_ppr;

    fn toy() -> PprGraph {
        PprGraph::from_edges(3, 6, &[(0, 3), (0, 4), (1, 4), (1, 5), (2, 5), (2, 3)])
    }

    #[test]
    fn item_vectors_equal_one_hot_push() {
        let g = toy();
        let cfg = PprConfig { alpha: 0.5, epsilon: 1e-10, ..Default::default() };
        let c = ItemPprCache::compute(&g, &cfg).unwrap();
        for i in 0..3 {
            let direct = push_ppr(&g, &[(g.item_node(i), 1.0)], &cfg).unwrap();
            assert_eq!(c.item(i).entries, direct.entries);
        }
    }

    #[test]
    fn cache_hit_runs_no_pushes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ppr.bin");
        let g = toy();
        let cfg = PprConfig::default();
        let first = ItemPprCache::load_or_compute(&path, &g, &cfg).unwrap();
        assert!(first.pushes > 0);
        let second = ItemPprCache::load_or_compute(&path, &g, &cfg).unwrap();
        assert_eq!(second.pushes, 0);
        assert_eq!(second.vectors.iter().map(|v| &v.entries).collect::<Vec<_>>(), first.vectors.iter().map(|v| &v.entries).collect::<Vec<_>>());
    }

    #[test]
    fn hash_mismatch_recomputes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ppr.bin");
        let cfg = PprConfig::default();
        ItemPprCache::load_or_compute(&path, &toy(), &cfg).unwrap();
        let other = PprGraph::from_edges(3, 6, &[(0, 3), (1, 4), (2, 5)]);
        let c = ItemPprCache::load_or_compute(&path, &other, &cfg).unwrap();
        assert!(c.pushes > 0);
        assert_eq!(c.graph_hash, other.content_hash());
    }
}
