// SPDX-License-Identifier: MIT OR Apache-2.0

//! User–item interaction data: the bipartite graph, TSV ingestion, a seeded
//! cluster generator, dataset splits and prompt rendering.

mod prompt;
mod split;

pub use prompt::{Answer, NO_ID, PAD_ID, YES_ID, ItemSpan, PromptRenderer, PromptSample, PromptTemplate, Tokenizer};
pub use split::{DatasetSplit, DeletionMode, SplitConfig, SplitManifest};

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type UserId = u32;
pub type ItemId = u32;
/// Index into [`InteractionGraph::edges`].
pub type EdgeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub key: String,
    pub cluster: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub key: String,
    /// Display name rendered into prompts; whitespace separates tokens.
    pub name: String,
    pub cluster: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    /// Binarized label, 0 or 1.
    pub label: u8,
    pub timestamp: i64,
}

/// Bipartite user–item graph with binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphData")]
pub struct InteractionGraph {
    users: Vec<User>,
    items: Vec<Item>,
    edges: Vec<Interaction>,
    #[serde(skip)]
    user_edges: Vec<Vec<EdgeId>>,
    #[serde(skip)]
    item_edges: Vec<Vec<EdgeId>>,
}

impl InteractionGraph {
    /// Builds a graph, checking endpoints, labels and duplicate pairs.
    pub fn new(users: Vec<User>, items: Vec<Item>, edges: Vec<Interaction>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for (id, e) in edges.iter().enumerate() {
            if e.user as usize >= users.len() || e.item as usize >= items.len() {
                return Err(Error::Config(format!("edge {id} has an endpoint outside the graph")));
            }
            if e.label > 1 {
                return Err(Error::Config(format!("edge {id} has non-binary label {}", e.label)));
            }
            if !seen.insert((e.user, e.item)) {
                return Err(Error::Config(format!(
                    "duplicate interaction ({}, {})",
                    users[e.user as usize].key, items[e.item as usize].key
                )));
            }
        }
        let mut graph = Self { users, items, edges, user_edges: Vec::new(), item_edges: Vec::new() };
        graph.rebuild_adjacency();
        Ok(graph)
    }

    fn rebuild_adjacency(&mut self) {
        self.user_edges = vec![Vec::new(); self.users.len()];
        self.item_edges = vec![Vec::new(); self.items.len()];
        for (id, e) in self.edges.iter().enumerate() {
            self.user_edges[e.user as usize].push(id);
            self.item_edges[e.item as usize].push(id);
        }
    }

    pub fn users(&self) -> &[User] {
        &self.users
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn edges(&self) -> &[Interaction] {
        &self.edges
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_edges(&self, user: UserId) -> &[EdgeId] {
        &self.user_edges[user as usize]
    }

    pub fn item_edges(&self, item: ItemId) -> &[EdgeId] {
        &self.item_edges[item as usize]
    }

    pub fn has_interaction(&self, user: UserId, item: ItemId) -> bool {
        self.user_edges(user).iter().any(|&e| self.edges[e].item == item)
    }

    /// Same users and items, only the listed edges. Edge ids are renumbered
    /// in the order given.
    pub fn subgraph(&self, edge_ids: &[EdgeId]) -> Self {
        let edges = edge_ids.iter().map(|&e| self.edges[e]).collect();
        let mut graph = Self {
            users: self.users.clone(),
            items: self.items.clone(),
            edges,
            user_edges: Vec::new(),
            item_edges: Vec::new(),
        };
        graph.rebuild_adjacency();
        graph
    }

    /// Positive items of `user`, oldest first (ties broken by edge id).
    pub fn positive_history(&self, user: UserId) -> Vec<ItemId> {
        let mut edges: Vec<&Interaction> = self
            .user_edges(user)
            .iter()
            .map(|&e| &self.edges[e])
            .filter(|e| e.label == 1)
            .collect();
        edges.sort_by_key(|e| e.timestamp);
        edges.into_iter().map(|e| e.item).collect()
    }

    /// Positive items of `user` with a timestamp strictly before `cutoff`, oldest first.
    pub fn positive_history_before(&self, user: UserId, cutoff: i64) -> Vec<ItemId> {
        let mut edges: Vec<&Interaction> = self
            .user_edges(user)
            .iter()
            .map(|&e| &self.edges[e])
            .filter(|e| e.label == 1 && e.timestamp < cutoff)
            .collect();
        edges.sort_by_key(|e| e.timestamp);
        edges.into_iter().map(|e| e.item).collect()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        self.edges.iter().filter(|e| e.label == 1).count() as f64 / self.edges.len() as f64
    }

    /// Content hash over users, items and edges; used to key caches.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("graph serializes");
        hex_digest(&bytes)
    }
}

#[derive(Deserialize)]
struct GraphData {
    users: Vec<User>,
    items: Vec<Item>,
    edges: Vec<Interaction>,
}

impl TryFrom<GraphData> for InteractionGraph {
    type Error = Error;

    fn try_from(raw: GraphData) -> Result<Self> {
        InteractionGraph::new(raw.users, raw.items, raw.edges)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Options for [`ingest_tsv`].
#[derive(Debug, Clone)]
pub struct TsvOptions {
    /// Ratings strictly greater than this become label 1.
    pub rating_threshold: f64,
    pub has_header: bool,
}

impl Default for TsvOptions {
    fn default() -> Self {
        Self { rating_threshold: 3.0, has_header: false }
    }
}

/// Reads `user<TAB>item<TAB>rating<TAB>timestamp` rows.
pub fn ingest_tsv(path: &Path, options: &TsvOptions) -> Result<InteractionGraph> {
    let file = std::fs::File::open(path)?;
    ingest_tsv_reader(std::io::BufReader::new(file), options)
}

pub fn ingest_tsv_reader<R: BufRead>(reader: R, options: &TsvOptions) -> Result<InteractionGraph> {
    let mut users: Vec<User> = Vec::new();
    let mut items: Vec<Item> = Vec::new();
    let mut user_index: HashMap<String, UserId> = HashMap::new();
    let mut item_index: HashMap<String, ItemId> = HashMap::new();
    // Latest row wins for a repeated (user, item) pair.
    let mut pair_index: HashMap<(UserId, ItemId), usize> = HashMap::new();
    let mut edges: Vec<Interaction> = Vec::new();

    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        if n == 0 && options.has_header {
            continue;
        }
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let (user_key, item_key) = (fields[0].trim(), fields[1].trim());
        if user_key.is_empty() || item_key.is_empty() {
            return Err(Error::Parse { line: line_no, message: "empty user or item id".into() });
        }
        let rating: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid rating {:?}", fields[2]),
        })?;
        let timestamp: i64 = fields[3].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid timestamp {:?}", fields[3]),
        })?;

        let user = *user_index.entry(user_key.to_string()).or_insert_with(|| {
            users.push(User { key: user_key.to_string(), cluster: None });
            (users.len() - 1) as UserId
        });
        let item = *item_index.entry(item_key.to_string()).or_insert_with(|| {
            let name: String = format!("item_{item_key}")
                .chars()
                .map(|c| if c.is_whitespace() { '_' } else { c })
                .collect();
            items.push(Item { key: item_key.to_string(), name, cluster: None });
            (items.len() - 1) as ItemId
        });
        let label = u8::from(rating > options.rating_threshold);
        let edge = Interaction { user, item, label, timestamp };
        match pair_index.get(&(user, item)) {
            Some(&idx) => {
                if timestamp >= edges[idx].timestamp {
                    edges[idx] = edge;
                }
            }
            None => {
                pair_index.insert((user, item), edges.len());
                edges.push(edge);
            }
        }
    }
    if edges.is_empty() {
        return Err(Error::EmptyDataset("no interaction rows".into()));
    }
    InteractionGraph::new(users, items, edges)
}

/// Parameters of the seeded cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub clusters: usize,
    pub seed: u64,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Probability that an interaction targets an item of the user's own cluster.
    pub in_cluster_rate: f64,
    /// Probability that an interaction's label disagrees with cluster membership.
    pub label_noise: f64,
    /// Prefix each item name with a word naming its cluster (`genre{c}`).
    pub tag_names: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 150,
            clusters: 3,
            seed: 1,
            min_interactions: 6,
            max_interactions: 12,
            in_cluster_rate: 0.6,
            label_noise: 0.1,
            tag_names: true,
        }
    }
}

/// Generates a clustered interaction graph. Users and items carry latent
/// cluster ids; an in-cluster interaction is positive with probability
/// `1 - label_noise`, a cross-cluster one with probability `label_noise`.
pub fn synthesize(config: &SynthConfig) -> Result<InteractionGraph> {
    if config.num_users == 0 || config.num_items == 0 || config.clusters == 0 {
        return Err(Error::Config("synth counts must be >= 1".into()));
    }
    if config.clusters > config.num_items {
        return Err(Error::Config(format!(
            "cluster_count {} exceeds num_items {}",
            config.clusters, config.num_items
        )));
    }
    if config.min_interactions == 0 || config.min_interactions > config.max_interactions {
        return Err(Error::Config("need 1 <= min_interactions <= max_interactions".into()));
    }
    if !(0.0..=1.0).contains(&config.in_cluster_rate) || !(0.0..=1.0).contains(&config.label_noise) {
        return Err(Error::Config("synth rates must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.clusters as u32;

    // Round-robin then shuffle so every cluster owns at least one item.
    let mut item_clusters: Vec<u32> = (0..config.num_items as u32).map(|i| i % k).collect();
    item_clusters.shuffle(&mut rng);
    let items: Vec<Item> = item_clusters
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let name = if config.tag_names { format!("genre{c} item{i}") } else { format!("item{i}") };
            Item { key: format!("{i}"), name, cluster: Some(c) }
        })
        .collect();
    let users: Vec<User> = (0..config.num_users)
        .map(|u| User { key: format!("{u}"), cluster: Some(rng.gen_range(0..k)) })
        .collect();

    let mut by_cluster: Vec<Vec<ItemId>> = vec![Vec::new(); config.clusters];
    for (i, &c) in item_clusters.iter().enumerate() {
        by_cluster[c as usize].push(i as ItemId);
    }

    let mut edges = Vec::new();
    let mut clock: i64 = 0;
    for (u, user) in users.iter().enumerate() {
        let own = user.cluster.expect("synthetic users carry clusters");
        let want = rng.gen_range(config.min_interactions..=config.max_interactions).min(config.num_items);
        let mut chosen: Vec<ItemId> = Vec::with_capacity(want);
        let mut attempts = 0;
        while chosen.len() < want && attempts < want * 50 {
            attempts += 1;
            let pick_own = k == 1 || rng.gen_bool(config.in_cluster_rate);
            let item = if pick_own {
                let pool = &by_cluster[own as usize];
                pool[rng.gen_range(0..pool.len())]
            } else {
                loop {
                    let i = rng.gen_range(0..config.num_items) as ItemId;
                    if item_clusters[i as usize] != own {
                        break i;
                    }
                }
            };
            if !chosen.contains(&item) {
                chosen.push(item);
            }
        }
        for item in chosen {
            let in_cluster = item_clusters[item as usize] == own;
            let flip = rng.gen_bool(config.label_noise);
            let label = u8::from(in_cluster != flip);
            clock += rng.gen_range(1..100);
            edges.push(Interaction { user: u as UserId, item, label, timestamp: clock });
        }
    }
    InteractionGraph::new(users, items, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "u1\t10\t4\t100\nu1\t11\t3\t101\nu2\t10\t5\t102\nu2\t12\t1\t103\nu1\t12\t2\t104\n";

    #[test]
    fn threshold_is_strict() {
        let g = ingest_tsv_reader(FIXTURE.as_bytes(), &TsvOptions::default()).unwrap();
        let label = |user: &str, item: &str| {
            g.edges()
                .iter()
                .find(|e| g.users()[e.user as usize].key == user && g.items()[e.item as usize].key == item)
                .unwrap()
                .label
        };
        assert_eq!(label("u1", "10"), 1);
        assert_eq!(label("u1", "11"), 0);
        assert_eq!(label("u2", "10"), 1);
    }

    #[test]
    fn fixture_counts() {
        let g = ingest_tsv_reader(FIXTURE.as_bytes(), &TsvOptions::default()).unwrap();
        assert_eq!((g.num_users(), g.num_items(), g.edges().len()), (2, 3, 5));
    }

    #[test]
    fn header_is_skipped() {
        let text = format!("user\titem\trating\ttimestamp\n{FIXTURE}");
        let g = ingest_tsv_reader(text.as_bytes(), &TsvOptions { has_header: true, ..Default::default() }).unwrap();
        assert_eq!(g.edges().len(), 5);
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "u1\t10\t4\t100\nu1\t11\tnope\t101\n";
        match ingest_tsv_reader(text.as_bytes(), &TsvOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let short = "u1\t10\t4\n";
        assert!(matches!(
            ingest_tsv_reader(short.as_bytes(), &TsvOptions::default()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(
            ingest_tsv_reader("".as_bytes(), &TsvOptions::default()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = SynthConfig { num_users: 20, num_items: 30, clusters: 3, seed: 7, ..Default::default() };
        let a = serde_json::to_vec(&synthesize(&cfg).unwrap()).unwrap();
        let b = serde_json::to_vec(&synthesize(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_rejects_too_many_clusters() {
        let cfg = SynthConfig { num_users: 5, num_items: 3, clusters: 4, ..Default::default() };
        assert!(matches!(synthesize(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn synth_positive_rate_in_band() {
        let cfg = SynthConfig { num_users: 200, num_items: 150, clusters: 4, seed: 1, ..Default::default() };
        let rate = synthesize(&cfg).unwrap().positive_rate();
        assert!((0.35..=0.65).contains(&rate), "positive rate {rate}");
    }

    #[test]
    fn single_cluster_has_no_item_structure() {
        let cfg = SynthConfig { num_users: 400, num_items: 10, clusters: 1, seed: 3, ..Default::default() };
        let g = synthesize(&cfg).unwrap();
        let overall = g.positive_rate();
        // Per-item positive rates agree with the global rate up to sampling noise.
        for item in 0..g.num_items() as ItemId {
            let edges = g.item_edges(item);
            let pos = edges.iter().filter(|&&e| g.edges()[e].label == 1).count() as f64;
            let n = edges.len() as f64;
            let sd = (overall * (1.0 - overall) / n).sqrt();
            assert!((pos / n - overall).abs() < 4.0 * sd + 1e-9, "item {item}");
        }
    }

    #[test]
    fn graph_rejects_duplicates() {
        let users = vec![User { key: "a".into(), cluster: None }];
        let items = vec![Item { key: "x".into(), name: "x".into(), cluster: None }];
        let e = Interaction { user: 0, item: 0, label: 1, timestamp: 0 };
        assert!(InteractionGraph::new(users, items, vec![e, e]).is_err());
    }
}
