//! Hierarchical navigable small-world graph index. Standard construction:
//! exponentially distributed node levels, greedy descent through upper
//! layers, beam search plus heuristic neighbor selection at insertion.
//!
//! Deleted rows stay in the graph and keep routing working; they are
//! filtered from results only.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EngineError, Result};
use crate::index::{Hit, TopK};
use crate::metric::{rank_key, Metric};

const LEVEL_CAP: u8 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    pub dim: usize,
    pub metric: Metric,
    pub m: usize,
    pub ef_construction: usize,
    /// External row id per internal node.
    pub row_ids: Vec<u32>,
    /// Node-major vector data.
    pub vectors: Vec<f32>,
    pub levels: Vec<u8>,
    /// `neighbors[node][layer]` = internal ids; present for layers 0..=level.
    pub neighbors: Vec<Vec<Vec<u32>>>,
    pub entry_point: u32,
    pub max_level: u8,
}

#[derive(PartialEq)]
struct Key(f64);
impl Eq for Key {}
impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl HnswIndex {
    pub fn build(
        vectors: &[f32],
        dim: usize,
        row_ids: Option<&[u32]>,
        metric: Metric,
        m: usize,
        ef_construction: usize,
        seed: u64,
    ) -> Result<HnswIndex> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(EngineError::InvalidParam("row-major vectors required".to_string()));
        }
        if m < 2 {
            return Err(EngineError::InvalidParam(format!("hnsw M must be ≥ 2, got {m}")));
        }
        let rows = vectors.len() / dim;
        if let Some(ids) = row_ids {
            if ids.len() != rows {
                return Err(EngineError::InvalidParam("row_ids length mismatch".to_string()));
            }
        }
        let mut index = HnswIndex {
            dim,
            metric,
            m,
            ef_construction: ef_construction.max(1),
            row_ids: row_ids
                .map(|ids| ids.to_vec())
                .unwrap_or_else(|| (0..rows as u32).collect()),
            vectors: vectors.to_vec(),
            levels: Vec::with_capacity(rows),
            neighbors: Vec::with_capacity(rows),
            entry_point: 0,
            max_level: 0,
        };
        let ml = 1.0 / (m as f64).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for node in 0..rows {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let level = ((-u.ln() * ml) as u8).min(LEVEL_CAP);
            index.insert(node as u32, level);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    fn vec_of(&self, node: u32) -> &[f32] {
        &self.vectors[node as usize * self.dim..(node as usize + 1) * self.dim]
    }

    fn key(&self, query: &[f32], node: u32) -> f64 {
        rank_key(self.metric, query, self.vec_of(node))
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            self.m * 2
        } else {
            self.m
        }
    }

    fn insert(&mut self, node: u32, level: u8) {
        self.levels.push(level);
        self.neighbors.push(vec![Vec::new(); level as usize + 1]);
        if node == 0 {
            self.entry_point = 0;
            self.max_level = level;
            return;
        }

        let query = self.vec_of(node).to_vec();
        let mut ep = self.entry_point;
        // Greedy descent through layers above the new node's level.
        let mut layer = self.max_level;
        while layer > level {
            ep = self.greedy_step(&query, ep, layer as usize);
            layer -= 1;
        }
        // Beam search and connect on each layer the node lives in.
        for l in (0..=level.min(self.max_level) as usize).rev() {
            let found = self.search_layer(&query, &[ep], self.ef_construction, l);
            let selected = self.select_heuristic(&found, self.m);
            for &(_, peer) in &selected {
                self.neighbors[node as usize][l].push(peer);
                self.neighbors[peer as usize][l].push(node);
                if self.neighbors[peer as usize][l].len() > self.max_degree(l) {
                    self.prune(peer, l);
                }
            }
            if let Some(&(_, best)) = found.first() {
                ep = best;
            }
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry_point = node;
        }
    }

    /// Move greedily toward the query on one layer until no neighbor is
    /// strictly closer.
    fn greedy_step(&self, query: &[f32], mut ep: u32, layer: usize) -> u32 {
        let mut best = self.key(query, ep);
        loop {
            let mut improved = false;
            for &n in &self.neighbors[ep as usize][layer] {
                let d = self.key(query, n);
                if d < best {
                    best = d;
                    ep = n;
                    improved = true;
                }
            }
            if !improved {
                return ep;
            }
        }
    }

    /// Classic ef-bounded best-first search on one layer. Returns up to `ef`
    /// nodes sorted best-first.
    fn search_layer(&self, query: &[f32], entries: &[u32], ef: usize, layer: usize) -> Vec<(f64, u32)> {
        let mut visited = vec![false; self.levels.len()];
        let mut candidates: BinaryHeap<Reverse<(Key, u32)>> = BinaryHeap::new();
        let mut results: BinaryHeap<(Key, u32)> = BinaryHeap::new();
        for &e in entries {
            if visited[e as usize] {
                continue;
            }
            visited[e as usize] = true;
            let d = self.key(query, e);
            candidates.push(Reverse((Key(d), e)));
            results.push((Key(d), e));
        }
        while let Some(Reverse((Key(d), node))) = candidates.pop() {
            let worst = results.peek().expect("results nonempty").0 .0;
            if results.len() >= ef && d > worst {
                break;
            }
            for &n in &self.neighbors[node as usize][layer] {
                if visited[n as usize] {
                    continue;
                }
                visited[n as usize] = true;
                let dn = self.key(query, n);
                if results.len() < ef || dn < results.peek().unwrap().0 .0 {
                    candidates.push(Reverse((Key(dn), n)));
                    results.push((Key(dn), n));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<(f64, u32)> = results.into_iter().map(|(Key(d), n)| (d, n)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    /// Heuristic neighbor selection over candidates already ranked by their
    /// distance key to the insertion point: keep one only when it is closer
    /// to that point than to every neighbor already kept; this preserves
    /// bridges between clusters.
    fn select_heuristic(&self, candidates: &[(f64, u32)], m: usize) -> Vec<(f64, u32)> {
        let mut selected: Vec<(f64, u32)> = Vec::with_capacity(m);
        for &(d, node) in candidates {
            if selected.len() >= m {
                break;
            }
            let vec_node = self.vec_of(node);
            let dominated = selected
                .iter()
                .any(|&(_, s)| rank_key(self.metric, vec_node, self.vec_of(s)) < d);
            if !dominated {
                selected.push((d, node));
            }
        }
        selected
    }

    /// Re-select an overfull node's neighbor list down to the degree cap.
    fn prune(&mut self, node: u32, layer: usize) {
        let query = self.vec_of(node).to_vec();
        let mut ranked: Vec<(f64, u32)> = self.neighbors[node as usize][layer]
            .iter()
            .map(|&n| (self.key(&query, n), n))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let keep = self.select_heuristic(&ranked, self.max_degree(layer));
        self.neighbors[node as usize][layer] = keep.into_iter().map(|(_, n)| n).collect();
    }

    pub fn search(
        &self,
        query: &[f32],
        metric: Metric,
        k: usize,
        ef_search: usize,
        exclude: &dyn Fn(u32) -> bool,
    ) -> Vec<Hit> {
        if self.is_empty() || k == 0 {
            return Vec::new();
        }
        debug_assert_eq!(metric, self.metric, "graph was built for {:?}", self.metric);
        let mut ep = self.entry_point;
        for layer in (1..=self.max_level as usize).rev() {
            ep = self.greedy_step(query, ep, layer);
        }
        let found = self.search_layer(query, &[ep], ef_search.max(k), 0);
        let mut top = TopK::new(k);
        for (d, node) in found {
            let row_id = self.row_ids[node as usize];
            if exclude(row_id) {
                continue;
            }
            top.push(d, row_id);
        }
        top.into_hits(metric)
    }
}
