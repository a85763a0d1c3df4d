//! IVF-Flat: k-means cluster centroids with one inverted list per centroid;
//! a query scans only the `nprobe` most promising lists.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EngineError, Result};
use crate::index::sq8::Sq8Codec;
use crate::index::{Hit, Quantization, TopK};
use crate::kmeans::{kmeans, DEFAULT_TOLERANCE};
use crate::metric::{rank_key, Metric};

pub const DEFAULT_KMEANS_ITERS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct IvfList {
    pub row_ids: Vec<u32>,
    /// Row-major raw floats, or SQ8 codes when the index is quantized.
    pub raw: Vec<f32>,
    pub codes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfFlatIndex {
    pub dim: usize,
    pub nlist: usize,
    /// nlist × dim, row-major.
    pub centroids: Vec<f32>,
    pub codec: Option<Sq8Codec>,
    pub lists: Vec<IvfList>,
}

impl IvfFlatIndex {
    /// Cluster `vectors` (row-major) into `nlist` lists. `row_ids` defaults
    /// to positions when `None`. Fixed `seed` ⇒ identical index.
    pub fn build(
        vectors: &[f32],
        dim: usize,
        row_ids: Option<&[u32]>,
        nlist: usize,
        max_iters: usize,
        seed: u64,
        quant: Quantization,
    ) -> Result<IvfFlatIndex> {
        if dim == 0 || vectors.is_empty() || vectors.len() % dim != 0 {
            return Err(EngineError::InvalidParam(
                "ivf build needs nonempty row-major vectors".to_string(),
            ));
        }
        let rows = vectors.len() / dim;
        if nlist == 0 || nlist > rows {
            return Err(EngineError::InvalidParam(format!(
                "nlist {nlist} outside 1..={rows}"
            )));
        }
        if let Some(ids) = row_ids {
            if ids.len() != rows {
                return Err(EngineError::InvalidParam("row_ids length mismatch".to_string()));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clustering = kmeans(vectors, dim, nlist, max_iters, DEFAULT_TOLERANCE, &mut rng);

        let codec = match quant {
            Quantization::None => None,
            Quantization::Sq8 => Some(Sq8Codec::train(vectors, dim)),
        };
        let mut lists: Vec<IvfList> = (0..nlist)
            .map(|_| IvfList { row_ids: Vec::new(), raw: Vec::new(), codes: Vec::new() })
            .collect();
        for (pos, row) in vectors.chunks_exact(dim).enumerate() {
            let c = clustering.assignments[pos] as usize;
            let row_id = row_ids.map_or(pos as u32, |ids| ids[pos]);
            lists[c].row_ids.push(row_id);
            match &codec {
                None => lists[c].raw.extend_from_slice(row),
                Some(codec) => codec.encode_into(row, &mut lists[c].codes),
            }
        }
        Ok(IvfFlatIndex { dim, nlist, centroids: clustering.centroids, codec, lists })
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(|l| l.row_ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scan the `nprobe` lists whose centroids rank best under the query's
    /// metric. `nprobe = nlist` is exhaustive and exact.
    pub fn search(
        &self,
        query: &[f32],
        metric: Metric,
        k: usize,
        nprobe: usize,
        exclude: &dyn Fn(u32) -> bool,
    ) -> Vec<Hit> {
        let mut ranked: Vec<(f64, usize)> = self
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, c)| (rank_key(metric, query, c), i))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut top = TopK::new(k);
        let mut scratch = Vec::with_capacity(self.dim);
        for (_, list_idx) in ranked.into_iter().take(nprobe.min(self.nlist)) {
            let list = &self.lists[list_idx];
            match &self.codec {
                None => {
                    for (i, row) in list.raw.chunks_exact(self.dim).enumerate() {
                        let row_id = list.row_ids[i];
                        if exclude(row_id) {
                            continue;
                        }
                        top.push(rank_key(metric, query, row), row_id);
                    }
                }
                Some(codec) => {
                    for (i, enc) in list.codes.chunks_exact(self.dim).enumerate() {
                        let row_id = list.row_ids[i];
                        if exclude(row_id) {
                            continue;
                        }
                        scratch.clear();
                        codec.decode_into(enc, &mut scratch);
                        top.push(rank_key(metric, query, &scratch), row_id);
                    }
                }
            }
        }
        top.into_hits(metric)
    }
}
