//! Disk-oriented bucket index: hierarchical 2-means packs SQ8-compressed
//! vectors into block-aligned buckets no larger than `bucket_cap` bytes.
//! Bucket centers live in an in-memory index; a search ranks centers first,
//! then scans the chosen buckets off disk. Building several independent
//! clusterings (replicas) trades disk space for recall, like multiple hash
//! tables in LSH.
//!
//! File layout: one header region padded to the cap boundary, then one
//! cap-sized block per bucket, so every bucket offset is a multiple of the
//! cap. Bucket block: `u16` member count, then `(u64 row_id, dim bytes)` per
//! member, zero-padded. The center table is persisted alongside in the
//! index-engine format.

use std::fs::File;
use std::io::Write as _;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::index::flat::FlatIndex;
use crate::index::hnsw::HnswIndex;
use crate::index::persist;
use crate::index::sq8::Sq8Codec;
use crate::index::{Hit, IndexParams, SearchKnobs, TopK, VectorIndex};
use crate::kmeans::{kmeans, DEFAULT_TOLERANCE};
use crate::metric::{rank_key, Metric};

pub const BUCKET_MAGIC: &[u8; 4] = b"MBK1";
pub const BUCKET_VERSION: u16 = 1;
pub const DEFAULT_BUCKET_CAP: u32 = 4096;
/// Center tables switch from FLAT to HNSW above this many centers.
pub const CENTER_HNSW_THRESHOLD: usize = 100_000;

/// On-disk bytes per member: an 8-byte row id plus one code byte per
/// dimension.
pub fn member_bytes(dim: usize) -> usize {
    8 + dim
}

/// Largest member count that keeps an encoded bucket within `cap` bytes
/// (2-byte count header included).
pub fn max_members(cap: u32, dim: usize) -> usize {
    (cap as usize).saturating_sub(2) / member_bytes(dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketParams {
    pub bucket_cap: u32,
    pub replicas: u32,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for BucketParams {
    fn default() -> BucketParams {
        BucketParams {
            bucket_cap: DEFAULT_BUCKET_CAP,
            replicas: 1,
            metric: Metric::Euclidean,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BucketMeta {
    pub replica: u32,
    pub offset: u64,
    pub members: u32,
    /// Encoded size before padding.
    pub byte_size: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TwoStageResult {
    pub hits: Vec<Hit>,
    /// Exactly `buckets_probed * bucket_cap`.
    pub bytes_read: u64,
    pub buckets_probed: u32,
}

pub struct BucketIndex {
    dim: usize,
    params: BucketParams,
    codec: Sq8Codec,
    meta: Vec<BucketMeta>,
    centers: VectorIndex,
    center_params: IndexParams,
    disk_path: PathBuf,
    file: File,
}

impl BucketIndex {
    /// Cluster `vectors` into cap-sized buckets (once per replica), write the
    /// block-aligned bucket file at `path` and the center table next to it.
    pub fn build(
        path: &Path,
        vectors: &[f32],
        dim: usize,
        row_ids: Option<&[u32]>,
        params: BucketParams,
    ) -> Result<BucketIndex> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(EngineError::InvalidParam(format!(
                "vector data of length {} is not a multiple of dim {dim}",
                vectors.len()
            )));
        }
        let rows = vectors.len() / dim;
        if rows == 0 {
            return Err(EngineError::InvalidParam("cannot build over zero vectors".into()));
        }
        if params.replicas == 0 {
            return Err(EngineError::InvalidParam("replicas must be at least 1".into()));
        }
        let per_bucket = max_members(params.bucket_cap, dim);
        if per_bucket == 0 {
            return Err(EngineError::InvalidParam(format!(
                "bucket cap {} cannot hold one dim-{dim} entry ({} bytes)",
                params.bucket_cap,
                2 + member_bytes(dim)
            )));
        }
        let ids: Vec<u32> = match row_ids {
            Some(ids) => {
                if ids.len() != rows {
                    return Err(EngineError::InvalidParam(format!(
                        "{} row ids for {rows} vectors",
                        ids.len()
                    )));
                }
                ids.to_vec()
            }
            None => (0..rows as u32).collect(),
        };

        let codec = Sq8Codec::train(vectors, dim);
        let mut built: Vec<BuiltBucket> = Vec::new();
        let mut meta: Vec<BucketMeta> = Vec::new();
        for replica in 0..params.replicas {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(replica as u64));
            // Depth-first split queue over row positions.
            let mut stack: Vec<Vec<u32>> = vec![(0..rows as u32).collect()];
            while let Some(cluster) = stack.pop() {
                if cluster.len() <= per_bucket {
                    built.push(emit_bucket(vectors, dim, &ids, &codec, &cluster));
                    meta.push(BucketMeta {
                        replica,
                        offset: 0,
                        members: cluster.len() as u32,
                        byte_size: (2 + cluster.len() * member_bytes(dim)) as u32,
                    });
                    continue;
                }
                let (left, right) = split_cluster(vectors, dim, &cluster, per_bucket, &mut rng);
                stack.push(right);
                stack.push(left);
            }
        }

        // Header, padded to the cap so bucket offsets stay aligned.
        let cap = params.bucket_cap as usize;
        let mut header = Vec::new();
        header.extend_from_slice(BUCKET_MAGIC);
        header.extend_from_slice(&BUCKET_VERSION.to_le_bytes());
        header.extend_from_slice(&params.bucket_cap.to_le_bytes());
        header.extend_from_slice(&params.replicas.to_le_bytes());
        header.extend_from_slice(&(built.len() as u32).to_le_bytes());
        header.extend_from_slice(&(dim as u32).to_le_bytes());
        header.push(metric_tag(params.metric));
        header.extend_from_slice(&params.seed.to_le_bytes());
        for replica in 0..params.replicas {
            let count = meta.iter().filter(|m| m.replica == replica).count() as u32;
            header.extend_from_slice(&count.to_le_bytes());
        }
        for v in codec.min.iter().chain(codec.max.iter()) {
            header.extend_from_slice(&v.to_le_bytes());
        }
        let header_blocks = header.len().div_ceil(cap);
        header.resize(header_blocks * cap, 0);

        let mut body = header;
        for (m, b) in meta.iter_mut().zip(&built) {
            m.offset = body.len() as u64;
            let start = body.len();
            body.extend_from_slice(&(b.members.len() as u16).to_le_bytes());
            for (row_id, codes) in &b.members {
                body.extend_from_slice(&(*row_id as u64).to_le_bytes());
                body.extend_from_slice(codes);
            }
            debug_assert_eq!(body.len() - start, m.byte_size as usize);
            body.resize(start + cap, 0);
        }
        let mut file = File::create(path)?;
        file.write_all(&body)?;
        file.sync_all()?;
        drop(file);

        let centers: Vec<f32> = built.iter().flat_map(|b| b.center.iter().copied()).collect();
        let (center_index, center_params) =
            build_center_index(centers, dim, built.len(), params.metric, params.seed)?;
        std::fs::write(centers_path(path), persist::encode_index(&center_index))?;

        let file = File::open(path)?;
        Ok(BucketIndex {
            dim,
            params,
            codec,
            meta,
            centers: center_index,
            center_params,
            disk_path: path.to_path_buf(),
            file,
        })
    }

    /// Reopen a bucket file written by [`BucketIndex::build`].
    pub fn open(path: &Path) -> Result<BucketIndex> {
        let corrupt = |reason: &str| EngineError::Corrupt {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let bytes = std::fs::read(path)?;
        if bytes.len() < 27 || &bytes[..4] != BUCKET_MAGIC {
            return Err(corrupt("missing MBK1 header"));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != BUCKET_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let bucket_cap = u32_at(6);
        let replicas = u32_at(10);
        let bucket_count = u32_at(14) as usize;
        let dim = u32_at(18) as usize;
        let metric = metric_from_tag(bytes[22]).ok_or_else(|| corrupt("bad metric tag"))?;
        let seed = u64::from_le_bytes(bytes[23..31].try_into().unwrap());
        let mut at = 31;
        let need = at + replicas as usize * 4 + dim * 8;
        if bucket_cap == 0 || bytes.len() < need {
            return Err(corrupt("truncated header"));
        }
        let mut per_replica = Vec::with_capacity(replicas as usize);
        for _ in 0..replicas {
            per_replica.push(u32_at(at));
            at += 4;
        }
        if per_replica.iter().map(|&c| c as usize).sum::<usize>() != bucket_count {
            return Err(corrupt("replica bucket counts disagree with total"));
        }
        let mut read_f32s = |n: usize| -> Vec<f32> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
                at += 4;
            }
            out
        };
        let min = read_f32s(dim);
        let max = read_f32s(dim);
        let codec = Sq8Codec { min, max };

        let cap = bucket_cap as usize;
        let header_blocks = at.div_ceil(cap);
        if bytes.len() != (header_blocks + bucket_count) * cap {
            return Err(corrupt("file length does not match bucket count"));
        }
        let limit = max_members(bucket_cap, dim);
        let mut meta = Vec::with_capacity(bucket_count);
        let mut next_replica = 0u32;
        let mut left_in_replica = per_replica.first().copied().unwrap_or(0);
        for b in 0..bucket_count {
            while left_in_replica == 0 {
                next_replica += 1;
                left_in_replica = per_replica[next_replica as usize];
            }
            let offset = ((header_blocks + b) * cap) as u64;
            let members =
                u16::from_le_bytes(bytes[offset as usize..offset as usize + 2].try_into().unwrap());
            if members as usize > limit {
                return Err(corrupt(&format!("bucket {b} overflows the cap")));
            }
            meta.push(BucketMeta {
                replica: next_replica,
                offset,
                members: members as u32,
                byte_size: (2 + members as usize * member_bytes(dim)) as u32,
            });
            left_in_replica -= 1;
        }

        let center_bytes = std::fs::read(centers_path(path))?;
        let centers = persist::decode_index(&center_bytes, "bucket centers")?;
        if centers.rows() != bucket_count || centers.dim() != dim {
            return Err(corrupt("center table does not match bucket file"));
        }
        let center_params = center_search_params(metric);
        Ok(BucketIndex {
            dim,
            params: BucketParams { bucket_cap, replicas, metric, seed },
            codec,
            meta,
            centers,
            center_params,
            disk_path: path.to_path_buf(),
            file: File::open(path)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &BucketParams {
        &self.params
    }

    pub fn codec(&self) -> &Sq8Codec {
        &self.codec
    }

    pub fn bucket_count(&self) -> usize {
        self.meta.len()
    }

    pub fn meta(&self) -> &[BucketMeta] {
        &self.meta
    }

    pub fn disk_path(&self) -> &Path {
        &self.disk_path
    }

    /// Center vector of one bucket (from the in-memory table).
    pub fn center_of(&self, bucket_id: u32) -> Vec<f32> {
        let pos = bucket_id as usize;
        match &self.centers {
            VectorIndex::Flat(f) => f.vector_at(pos),
            VectorIndex::Hnsw(h) => h.vectors[pos * self.dim..(pos + 1) * self.dim].to_vec(),
            VectorIndex::Ivf(_) => unreachable!("center tables are flat or hnsw"),
        }
    }

    /// Read one bucket's members `(row_id, sq8 payload)` back off disk.
    pub fn read_bucket(&self, bucket_id: u32) -> Result<Vec<(u32, Vec<u8>)>> {
        let m = self.meta.get(bucket_id as usize).ok_or_else(|| {
            EngineError::InvalidParam(format!("bucket {bucket_id} out of range"))
        })?;
        let mut block = vec![0u8; self.params.bucket_cap as usize];
        self.file.read_exact_at(&mut block, m.offset)?;
        parse_bucket_block(&block, self.dim, &self.disk_path)
    }

    /// Two-stage search: rank centers in memory, scan the `nprobe` best
    /// buckets off disk, dedup row ids keeping the best score.
    pub fn search(&self, query: &[f32], nprobe: usize, k: usize) -> Result<TwoStageResult> {
        if query.len() != self.dim {
            return Err(EngineError::DimensionMismatch { expected: self.dim, got: query.len() });
        }
        if k == 0 || nprobe == 0 {
            return Err(EngineError::InvalidParam("k and nprobe must be at least 1".into()));
        }
        let nprobe = nprobe.min(self.meta.len());
        let stage1 = self.centers.search(
            query,
            self.params.metric,
            nprobe,
            &SearchKnobs { nprobe: None, ef_search: Some(nprobe.max(self.center_params.ef_search)) },
            &self.center_params,
            &|_| false,
        )?;

        let cap = self.params.bucket_cap as usize;
        let mut block = vec![0u8; cap];
        let mut decoded = Vec::with_capacity(self.dim);
        // row_id -> best rank key across every probed bucket and replica.
        let mut best: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
        for probe in &stage1 {
            let m = &self.meta[probe.row_id as usize];
            self.file.read_exact_at(&mut block, m.offset)?;
            let members = u16::from_le_bytes(block[..2].try_into().unwrap()) as usize;
            let stride = member_bytes(self.dim);
            for i in 0..members {
                let at = 2 + i * stride;
                let row = u64::from_le_bytes(block[at..at + 8].try_into().unwrap()) as u32;
                decoded.clear();
                self.codec.decode_into(&block[at + 8..at + stride], &mut decoded);
                let key = rank_key(self.params.metric, query, &decoded);
                let slot = best.entry(row).or_insert(f64::INFINITY);
                if key < *slot {
                    *slot = key;
                }
            }
        }
        let mut top = TopK::new(k);
        for (row, key) in best {
            top.push(key, row);
        }
        Ok(TwoStageResult {
            hits: top.into_hits(self.params.metric),
            bytes_read: stage1.len() as u64 * self.params.bucket_cap as u64,
            buckets_probed: stage1.len() as u32,
        })
    }
}

struct BuiltBucket {
    center: Vec<f32>,
    members: Vec<(u32, Vec<u8>)>,
}

fn emit_bucket(
    vectors: &[f32],
    dim: usize,
    ids: &[u32],
    codec: &Sq8Codec,
    cluster: &[u32],
) -> BuiltBucket {
    let mut sum = vec![0f64; dim];
    let mut members = Vec::with_capacity(cluster.len());
    for &pos in cluster {
        let v = &vectors[pos as usize * dim..(pos as usize + 1) * dim];
        for (s, x) in sum.iter_mut().zip(v) {
            *s += *x as f64;
        }
        let mut codes = Vec::with_capacity(dim);
        codec.encode_into(v, &mut codes);
        members.push((ids[pos as usize], codes));
    }
    let n = cluster.len() as f64;
    let center = sum.iter().map(|s| (s / n) as f32).collect();
    BuiltBucket { center, members }
}

/// 2-means split; a degenerate clustering (both centroids identical, e.g.
/// all points equal) peels off one full bucket instead, so indistinguishable
/// rows pack into a chain of size-capped buckets.
fn split_cluster(
    vectors: &[f32],
    dim: usize,
    cluster: &[u32],
    per_bucket: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<u32>, Vec<u32>) {
    let mut sub = Vec::with_capacity(cluster.len() * dim);
    for &pos in cluster {
        sub.extend_from_slice(&vectors[pos as usize * dim..(pos as usize + 1) * dim]);
    }
    let result = kmeans(&sub, dim, 2, crate::index::ivf::DEFAULT_KMEANS_ITERS, DEFAULT_TOLERANCE, rng);
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (i, &assignment) in result.assignments.iter().enumerate() {
        if assignment == 0 {
            left.push(cluster[i]);
        } else {
            right.push(cluster[i]);
        }
    }
    if left.is_empty() || right.is_empty() || result.centroids[..dim] == result.centroids[dim..] {
        return (cluster[..per_bucket].to_vec(), cluster[per_bucket..].to_vec());
    }
    (left, right)
}

fn build_center_index(
    centers: Vec<f32>,
    dim: usize,
    count: usize,
    metric: Metric,
    seed: u64,
) -> Result<(VectorIndex, IndexParams)> {
    let params = center_search_params(metric);
    let index = if count > CENTER_HNSW_THRESHOLD {
        VectorIndex::Hnsw(HnswIndex::build(
            &centers,
            dim,
            None,
            metric,
            params.m,
            params.ef_construction,
            seed,
        )?)
    } else {
        VectorIndex::Flat(FlatIndex::from_raw(dim, centers))
    };
    Ok((index, params))
}

fn center_search_params(metric: Metric) -> IndexParams {
    IndexParams::flat(metric)
}

fn centers_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".centers");
    path.with_file_name(name)
}

fn parse_bucket_block(block: &[u8], dim: usize, path: &Path) -> Result<Vec<(u32, Vec<u8>)>> {
    let members = u16::from_le_bytes(block[..2].try_into().unwrap()) as usize;
    let stride = member_bytes(dim);
    if 2 + members * stride > block.len() {
        return Err(EngineError::Corrupt {
            path: path.display().to_string(),
            reason: "bucket member count overflows its block".into(),
        });
    }
    let mut out = Vec::with_capacity(members);
    for i in 0..members {
        let at = 2 + i * stride;
        let row = u64::from_le_bytes(block[at..at + 8].try_into().unwrap()) as u32;
        out.push((row, block[at + 8..at + stride].to_vec()));
    }
    Ok(out)
}

fn metric_tag(metric: Metric) -> u8 {
    match metric {
        Metric::Euclidean => 0,
        Metric::InnerProduct => 1,
        Metric::Angular => 2,
    }
}

fn metric_from_tag(tag: u8) -> Option<Metric> {
    match tag {
        0 => Some(Metric::Euclidean),
        1 => Some(Metric::InnerProduct),
        2 => Some(Metric::Angular),
        _ => None,
    }
}
