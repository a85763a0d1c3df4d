//! FLAT index: exhaustive scan, exact by construction. Also the fallback
//! every segment can serve when no built index is loaded.

use crate::index::sq8::Sq8Codec;
use crate::index::{Hit, Quantization, TopK};
use crate::metric::{rank_key, Metric};

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    Raw(Vec<f32>),
    Sq8 { codec: Sq8Codec, codes: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    pub dim: usize,
    /// Row id of each stored position (identity unless built over a subset).
    pub row_ids: Vec<u32>,
    pub storage: Storage,
}

impl FlatIndex {
    /// Index rows 0..n in place.
    pub fn from_raw(dim: usize, vectors: Vec<f32>) -> FlatIndex {
        assert!(dim > 0 && vectors.len() % dim == 0);
        let rows = vectors.len() / dim;
        FlatIndex {
            dim,
            row_ids: (0..rows as u32).collect(),
            storage: Storage::Raw(vectors),
        }
    }

    /// Index a subset of rows (used by rebuilds over the live set).
    pub fn from_rows(dim: usize, row_ids: Vec<u32>, vectors: Vec<f32>, quant: Quantization) -> FlatIndex {
        assert_eq!(row_ids.len() * dim, vectors.len());
        let storage = match quant {
            Quantization::None => Storage::Raw(vectors),
            Quantization::Sq8 => {
                let codec = Sq8Codec::train(&vectors, dim);
                let mut codes = Vec::with_capacity(vectors.len());
                for row in vectors.chunks_exact(dim) {
                    codec.encode_into(row, &mut codes);
                }
                Storage::Sq8 { codec, codes }
            }
        };
        FlatIndex { dim, row_ids, storage }
    }

    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    /// Decoded vector at a stored position.
    pub fn vector_at(&self, pos: usize) -> Vec<f32> {
        match &self.storage {
            Storage::Raw(v) => v[pos * self.dim..(pos + 1) * self.dim].to_vec(),
            Storage::Sq8 { codec, codes } => {
                let mut out = Vec::with_capacity(self.dim);
                codec.decode_into(&codes[pos * self.dim..(pos + 1) * self.dim], &mut out);
                out
            }
        }
    }

    pub fn search(
        &self,
        query: &[f32],
        metric: Metric,
        k: usize,
        exclude: &dyn Fn(u32) -> bool,
    ) -> Vec<Hit> {
        let mut top = TopK::new(k);
        match &self.storage {
            Storage::Raw(vectors) => {
                for (pos, row) in vectors.chunks_exact(self.dim).enumerate() {
                    let row_id = self.row_ids[pos];
                    if exclude(row_id) {
                        continue;
                    }
                    top.push(rank_key(metric, query, row), row_id);
                }
            }
            Storage::Sq8 { codec, codes } => {
                let mut scratch = Vec::with_capacity(self.dim);
                for (pos, enc) in codes.chunks_exact(self.dim).enumerate() {
                    let row_id = self.row_ids[pos];
                    if exclude(row_id) {
                        continue;
                    }
                    scratch.clear();
                    codec.decode_into(enc, &mut scratch);
                    top.push(rank_key(metric, query, &scratch), row_id);
                }
            }
        }
        top.into_hits(metric)
    }
}

/// Exact top-k over row-major data without building anything; the oracle the
/// test suite compares every index against.
pub fn brute_force(
    data: &[f32],
    dim: usize,
    query: &[f32],
    metric: Metric,
    k: usize,
    exclude: &dyn Fn(u32) -> bool,
) -> Vec<Hit> {
    let mut top = TopK::new(k);
    for (pos, row) in data.chunks_exact(dim).enumerate() {
        if exclude(pos as u32) {
            continue;
        }
        top.push(rank_key(metric, query, row), pos as u32);
    }
    top.into_hits(metric)
}
