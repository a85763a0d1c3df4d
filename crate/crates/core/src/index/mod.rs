//! ANN index engine: FLAT, IVF-Flat, HNSW, scalar quantization, delete
//! bitmaps, and the per-segment search dispatch.

pub mod flat;
pub mod hnsw;
pub mod ivf;
pub mod persist;
pub mod sq8;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::metric::{score_from_key, Metric};

pub use flat::FlatIndex;
pub use hnsw::HnswIndex;
pub use ivf::IvfFlatIndex;
pub use sq8::Sq8Codec;

/// One candidate from a segment search. `row_id` is the row's position in
/// its segment; `score` is in the metric's own terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub row_id: u32,
    pub score: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Flat,
    IvfFlat,
    Hnsw,
}

impl IndexKind {
    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Flat => "flat",
            IndexKind::IvfFlat => "ivf_flat",
            IndexKind::Hnsw => "hnsw",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Quantization {
    #[default]
    None,
    Sq8,
}

/// Build and search parameters for a collection's vector index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexParams {
    pub kind: IndexKind,
    pub metric: Metric,
    #[serde(default = "defaults::nlist")]
    pub nlist: usize,
    #[serde(default = "defaults::nprobe")]
    pub nprobe: usize,
    #[serde(default = "defaults::m")]
    pub m: usize,
    #[serde(default = "defaults::ef_construction")]
    pub ef_construction: usize,
    #[serde(default = "defaults::ef_search")]
    pub ef_search: usize,
    #[serde(default)]
    pub quantization: Quantization,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
}

mod defaults {
    pub fn nlist() -> usize {
        64
    }
    pub fn nprobe() -> usize {
        8
    }
    pub fn m() -> usize {
        16
    }
    pub fn ef_construction() -> usize {
        200
    }
    pub fn ef_search() -> usize {
        64
    }
    pub fn seed() -> u64 {
        42
    }
}

impl IndexParams {
    pub fn flat(metric: Metric) -> IndexParams {
        IndexParams { kind: IndexKind::Flat, ..IndexParams::default_for(metric) }
    }

    pub fn default_for(metric: Metric) -> IndexParams {
        IndexParams {
            kind: IndexKind::IvfFlat,
            metric,
            nlist: defaults::nlist(),
            nprobe: defaults::nprobe(),
            m: defaults::m(),
            ef_construction: defaults::ef_construction(),
            ef_search: defaults::ef_search(),
            quantization: Quantization::None,
            seed: defaults::seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nlist == 0 || self.nprobe == 0 || self.nprobe > self.nlist {
            return Err(EngineError::InvalidParam(format!(
                "need 1 ≤ nprobe ≤ nlist, got nprobe={} nlist={}",
                self.nprobe, self.nlist
            )));
        }
        if self.m < 2 {
            return Err(EngineError::InvalidParam(format!("hnsw M must be ≥ 2, got {}", self.m)));
        }
        if self.ef_construction == 0 || self.ef_search == 0 {
            return Err(EngineError::InvalidParam("ef values must be ≥ 1".to_string()));
        }
        Ok(())
    }
}

/// Per-request knob overrides; anything unset falls back to the collection's
/// configured [`IndexParams`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchKnobs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nprobe: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ef_search: Option<usize>,
}

/// Per-row deletion marks for one segment. Bits only ever get set; a rebuild
/// swaps in a fresh bitmap over the surviving rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeleteBitmap {
    words: Vec<u64>,
    len: u32,
    deleted: u32,
}

impl DeleteBitmap {
    pub fn new(len: u32) -> DeleteBitmap {
        DeleteBitmap { words: vec![0; (len as usize + 63) / 64], len, deleted: 0 }
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn deleted_count(&self) -> u32 {
        self.deleted
    }

    /// Extend to cover a growing segment's new rows (new rows start live).
    pub fn grow(&mut self, len: u32) {
        if len > self.len {
            self.len = len;
            self.words.resize((len as usize + 63) / 64, 0);
        }
    }

    /// Mark a row deleted; returns true when the bit was newly set.
    pub fn set(&mut self, row: u32) -> bool {
        assert!(row < self.len, "row {row} out of range {}", self.len);
        let (w, b) = (row as usize / 64, row % 64);
        let mask = 1u64 << b;
        if self.words[w] & mask == 0 {
            self.words[w] |= mask;
            self.deleted += 1;
            true
        } else {
            false
        }
    }

    pub fn is_deleted(&self, row: u32) -> bool {
        if row >= self.len {
            return false;
        }
        self.words[row as usize / 64] & (1 << (row % 64)) != 0
    }

    pub fn live_count(&self) -> u32 {
        self.len - self.deleted
    }

    pub fn iter_deleted(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.len).filter(|r| self.is_deleted(*r))
    }
}

/// Rebuild once the deleted fraction reaches the threshold (inclusive).
pub fn should_rebuild(bitmap: &DeleteBitmap, threshold_fraction: f64) -> bool {
    if bitmap.len() == 0 {
        return false;
    }
    f64::from(bitmap.deleted_count()) / f64::from(bitmap.len()) >= threshold_fraction
}

pub const DEFAULT_REBUILD_THRESHOLD: f64 = 0.2;
pub const DEFAULT_OVERSAMPLE: usize = 4;

#[derive(PartialEq)]
struct OrdKey(f64);

impl Eq for OrdKey {}
impl PartialOrd for OrdKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Streaming top-k accumulator over ranking keys (smaller = better). Ties
/// break toward the lower row id, which keeps every index deterministic and
/// comparable against brute-force oracles.
pub struct TopK {
    k: usize,
    heap: BinaryHeap<(OrdKey, u32)>,
}

impl TopK {
    pub fn new(k: usize) -> TopK {
        TopK { k, heap: BinaryHeap::with_capacity(k + 1) }
    }

    pub fn push(&mut self, key: f64, row_id: u32) {
        if self.k == 0 {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push((OrdKey(key), row_id));
            return;
        }
        let worst = self.heap.peek().expect("heap nonempty");
        if (OrdKey(key), row_id) < (OrdKey(worst.0 .0), worst.1) {
            self.heap.pop();
            self.heap.push((OrdKey(key), row_id));
        }
    }

    /// Current cutoff: a candidate must beat this (key, row) to enter a full
    /// accumulator.
    pub fn threshold(&self) -> Option<f64> {
        if self.heap.len() < self.k {
            None
        } else {
            self.heap.peek().map(|(k, _)| k.0)
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Best-first hits with scores translated back into metric terms.
    pub fn into_hits(self, metric: Metric) -> Vec<Hit> {
        let mut pairs: Vec<(OrdKey, u32)> = self.heap.into_vec();
        pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        pairs
            .into_iter()
            .map(|(key, row_id)| Hit { row_id, score: score_from_key(metric, key.0) })
            .collect()
    }
}

/// A built (or trivial) per-segment vector index.
#[derive(Debug, Clone, PartialEq)]
pub enum VectorIndex {
    Flat(FlatIndex),
    Ivf(IvfFlatIndex),
    Hnsw(HnswIndex),
}

impl VectorIndex {
    pub fn kind(&self) -> IndexKind {
        match self {
            VectorIndex::Flat(_) => IndexKind::Flat,
            VectorIndex::Ivf(_) => IndexKind::IvfFlat,
            VectorIndex::Hnsw(_) => IndexKind::Hnsw,
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            VectorIndex::Flat(i) => i.len(),
            VectorIndex::Ivf(i) => i.len(),
            VectorIndex::Hnsw(i) => i.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            VectorIndex::Flat(i) => i.dim,
            VectorIndex::Ivf(i) => i.dim,
            VectorIndex::Hnsw(i) => i.dim,
        }
    }

    /// Top-k search. `exclude` rows are skipped outright (deletes and, for
    /// exact paths, visibility); HNSW still traverses excluded rows and
    /// filters them from the result set.
    pub fn search(
        &self,
        query: &[f32],
        metric: Metric,
        k: usize,
        knobs: &SearchKnobs,
        params: &IndexParams,
        exclude: &dyn Fn(u32) -> bool,
    ) -> Result<Vec<Hit>> {
        if query.len() != self.dim() {
            return Err(EngineError::DimensionMismatch {
                expected: self.dim(),
                got: query.len(),
            });
        }
        match self {
            VectorIndex::Flat(i) => Ok(i.search(query, metric, k, exclude)),
            VectorIndex::Ivf(i) => {
                let nprobe = knobs.nprobe.unwrap_or(params.nprobe).clamp(1, i.nlist.max(1));
                Ok(i.search(query, metric, k, nprobe, exclude))
            }
            VectorIndex::Hnsw(i) => {
                let ef = knobs.ef_search.unwrap_or(params.ef_search).max(k);
                Ok(i.search(query, metric, k, ef, exclude))
            }
        }
    }
}

/// Segment-level search: dispatch to the index, apply hard exclusions, and
/// run the post-filter strategy when an attribute predicate is present
/// (oversample `k × oversample`, filter, truncate to k).
pub fn segment_search(
    index: &VectorIndex,
    query: &[f32],
    metric: Metric,
    k: usize,
    knobs: &SearchKnobs,
    params: &IndexParams,
    bitmap: Option<&DeleteBitmap>,
    attr_filter: Option<&dyn Fn(u32) -> bool>,
    oversample: usize,
) -> Result<Vec<Hit>> {
    let exclude = |row: u32| bitmap.map_or(false, |b| b.is_deleted(row));
    match attr_filter {
        None => index.search(query, metric, k, knobs, params, &exclude),
        Some(pred) => {
            let fetch = k.saturating_mul(oversample.max(1));
            let mut hits = index.search(query, metric, fetch, knobs, params, &exclude)?;
            hits.retain(|h| pred(h.row_id));
            hits.truncate(k);
            Ok(hits)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_keeps_best_and_breaks_ties_by_row_id() {
        let mut t = TopK::new(3);
        for (key, row) in [(5.0, 9), (1.0, 4), (1.0, 2), (7.0, 1), (1.0, 7), (0.5, 8)] {
            t.push(key, row);
        }
        let hits = t.into_hits(Metric::Euclidean);
        let rows: Vec<u32> = hits.iter().map(|h| h.row_id).collect();
        // keys: 0.5→row 8, then the 1.0 ties keep rows 2 and 4.
        assert_eq!(rows, vec![8, 2, 4]);
    }

    #[test]
    fn topk_scores_translate_back_per_metric() {
        let mut t = TopK::new(1);
        t.push(9.0, 0);
        assert_eq!(t.into_hits(Metric::Euclidean)[0].score, 3.0);
        let mut t = TopK::new(1);
        t.push(-0.75, 0);
        assert_eq!(t.into_hits(Metric::InnerProduct)[0].score, 0.75);
    }

    #[test]
    fn bitmap_is_monotone_and_counts() {
        let mut b = DeleteBitmap::new(130);
        assert!(b.set(0));
        assert!(b.set(64));
        assert!(b.set(129));
        assert!(!b.set(64), "second set is a no-op");
        assert_eq!(b.deleted_count(), 3);
        assert!(b.is_deleted(129) && !b.is_deleted(1));
        assert_eq!(b.iter_deleted().collect::<Vec<_>>(), vec![0, 64, 129]);
        b.grow(200);
        assert!(!b.is_deleted(150));
        assert_eq!(b.deleted_count(), 3);
    }

    #[test]
    fn rebuild_threshold_is_inclusive() {
        let mut b = DeleteBitmap::new(100);
        assert!(!should_rebuild(&b, 0.2), "0 deletions");
        for r in 0..19 {
            b.set(r);
        }
        assert!(!should_rebuild(&b, 0.2), "19%");
        b.set(19);
        assert!(should_rebuild(&b, 0.2), "20% hits the boundary");
        assert!(!should_rebuild(&DeleteBitmap::new(0), 0.2), "empty segment");
    }

    #[test]
    fn params_validation_catches_bad_knobs() {
        let mut p = IndexParams::default_for(Metric::Euclidean);
        assert!(p.validate().is_ok());
        p.nprobe = p.nlist + 1;
        assert!(p.validate().is_err());
        p = IndexParams::default_for(Metric::Euclidean);
        p.m = 1;
        assert!(p.validate().is_err());
    }
}
