//! Index node: builds vector indexes for sealed segments from their binlogs,
//! skipping rows the delete log has claimed. Hit row ids are binlog row
//! positions, so delete bitmaps keep working across rebuilds.

use std::collections::BTreeSet;

use serde::Serialize;

use logvec_core::binlog::{self, Column};
use logvec_core::error::{EngineError, Result};
use logvec_core::index::persist::encode_index;
use logvec_core::index::{
    FlatIndex, HnswIndex, IndexKind, IndexParams, IvfFlatIndex, VectorIndex,
};
use logvec_core::schema::{PkValue, Schema};
use logvec_core::segment::SegmentDescriptor;

use crate::ctx::Ctx;
use crate::deletes;

const KMEANS_MAX_ITERS: usize = 25;

pub fn index_prefix(descriptor: &SegmentDescriptor) -> String {
    format!(
        "collection/{}/segment/{}/index/",
        descriptor.collection_id, descriptor.segment_id
    )
}

pub fn index_key(descriptor: &SegmentDescriptor, kind: &str, generation: u64) -> String {
    format!("{}{kind}-g{generation}.mix", index_prefix(descriptor))
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IndexNodeStats {
    pub builds_done: u64,
    pub rows_indexed: u64,
}

pub struct BuiltIndex {
    pub segment_id: u64,
    pub index_kind: String,
    pub index_path: String,
    pub live_rows: u64,
}

/// One index-building worker. Assignment and retry policy live with the
/// index coordinator; the node just builds what it is handed.
pub struct IndexNode {
    pub node_id: u64,
    /// Rows across builds currently assigned here; the coordinator picks the
    /// least-loaded node by this number.
    pub queued_rows: u64,
    /// Virtual ms of the last assignment or completion; idle nodes get
    /// reaped by the coordinator.
    pub last_active_ms: u64,
    stats: IndexNodeStats,
}

impl IndexNode {
    pub fn new(node_id: u64) -> IndexNode {
        IndexNode { node_id, queued_rows: 0, last_active_ms: 0, stats: IndexNodeStats::default() }
    }

    pub fn stats(&self) -> IndexNodeStats {
        self.stats
    }

    /// Builds the requested index over the segment's live rows and persists
    /// it under a fresh generation key. Small segments get what fits: nlist
    /// clamps to the live row count and an empty segment gets a flat index.
    pub fn build_segment(
        &mut self,
        ctx: &mut Ctx,
        schema: &Schema,
        descriptor: &SegmentDescriptor,
        params: &IndexParams,
    ) -> Result<BuiltIndex> {
        let (live_ids, vectors, dim) = live_vectors(ctx, schema, descriptor)?;
        let index = build_index(&live_ids, &vectors, dim, params)?;
        let generation = ctx.store.list(&index_prefix(descriptor))?.len() as u64 + 1;
        let key = index_key(descriptor, index.kind().name(), generation);
        ctx.store.put(&key, &encode_index(&index))?;
        self.stats.builds_done += 1;
        self.stats.rows_indexed += live_ids.len() as u64;
        self.last_active_ms = ctx.now_ms();
        Ok(BuiltIndex {
            segment_id: descriptor.segment_id,
            index_kind: index.kind().name().to_string(),
            index_path: key,
            live_rows: live_ids.len() as u64,
        })
    }
}

/// Reads the primary vector column, returning binlog positions and vectors
/// for rows the delete log has not claimed.
fn live_vectors(
    ctx: &Ctx,
    schema: &Schema,
    descriptor: &SegmentDescriptor,
) -> Result<(Vec<u32>, Vec<f32>, usize)> {
    let field = &schema.vector_fields[0].name;
    let corrupt = |reason: String| EngineError::Corrupt {
        path: format!("segment {}", descriptor.segment_id),
        reason,
    };
    let vec_key = descriptor
        .binlog_paths
        .get(field)
        .ok_or_else(|| corrupt(format!("descriptor lists no binlog for field {field}")))?;
    let bytes = ctx.store.get(vec_key)?;
    let kind = binlog::column_kind(schema, field).expect("declared vector field");
    let (_, column) = binlog::decode(&bytes, kind, vec_key)?;
    let (dim, values) = match column {
        Column::Float32 { dim, values } => (dim as usize, values),
        _ => return Err(corrupt(format!("field {field} is not a vector column"))),
    };
    let rows = if dim == 0 { 0 } else { values.len() / dim };

    let deleted: BTreeSet<PkValue> =
        deletes::read_delete_log(ctx.store, descriptor.collection_id, descriptor.segment_id)?
            .into_iter()
            .map(|(pk, _)| pk)
            .collect();
    if deleted.is_empty() {
        return Ok(((0..rows as u32).collect(), values, dim));
    }

    let pk_key = descriptor
        .binlog_paths
        .get(binlog::PK_COLUMN)
        .ok_or_else(|| corrupt("descriptor lists no pk binlog".to_string()))?;
    let pk_bytes = ctx.store.get(pk_key)?;
    let pk_kind = binlog::column_kind(schema, binlog::PK_COLUMN).expect("pk column always exists");
    let (_, pk_column) = binlog::decode(&pk_bytes, pk_kind, pk_key)?;
    let pks: Vec<PkValue> = match pk_column {
        Column::Int64(v) => v.into_iter().map(PkValue::Int).collect(),
        Column::Utf8(v) => v.into_iter().map(PkValue::Str).collect(),
        _ => return Err(corrupt("pk binlog holds a non-key column".to_string())),
    };
    if pks.len() != rows {
        return Err(corrupt(format!("pk column has {} rows, vectors {rows}", pks.len())));
    }

    let mut ids = Vec::new();
    let mut kept = Vec::new();
    for (pos, pk) in pks.iter().enumerate() {
        if !deleted.contains(pk) {
            ids.push(pos as u32);
            kept.extend_from_slice(&values[pos * dim..(pos + 1) * dim]);
        }
    }
    Ok((ids, kept, dim))
}

fn build_index(
    row_ids: &[u32],
    vectors: &[f32],
    dim: usize,
    params: &IndexParams,
) -> Result<VectorIndex> {
    let rows = row_ids.len();
    let kind = if rows == 0 { IndexKind::Flat } else { params.kind };
    match kind {
        IndexKind::Flat => Ok(VectorIndex::Flat(FlatIndex::from_rows(
            dim,
            row_ids.to_vec(),
            vectors.to_vec(),
            params.quantization,
        ))),
        IndexKind::IvfFlat => {
            let nlist = params.nlist.min(rows);
            Ok(VectorIndex::Ivf(IvfFlatIndex::build(
                vectors,
                dim,
                Some(row_ids),
                nlist,
                KMEANS_MAX_ITERS,
                params.seed,
                params.quantization,
            )?))
        }
        IndexKind::Hnsw => Ok(VectorIndex::Hnsw(HnswIndex::build(
            vectors,
            dim,
            Some(row_ids),
            params.metric,
            params.m,
            params.ef_construction,
            params.seed,
        )?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use logvec_core::clock::Clock;
    use logvec_core::hlc::HlcTimestamp;
    use logvec_core::index::persist::decode_index;
    use logvec_core::index::SearchKnobs;
    use logvec_core::log::Broker;
    use logvec_core::metric::Metric;
    use logvec_core::schema::{Entity, Schema};
    use logvec_core::segment::SegmentState;
    use logvec_core::store::ObjectStore;

    use crate::columns::SegmentRows;
    use crate::config::EngineConfig;
    use crate::meta::MetaStore;

    struct Bed {
        _dir: tempfile::TempDir,
        broker: Broker,
        meta: MetaStore,
        store: ObjectStore,
        config: EngineConfig,
    }

    impl Bed {
        fn ctx(&mut self) -> Ctx<'_> {
            Ctx {
                broker: &mut self.broker,
                meta: &mut self.meta,
                store: &self.store,
                config: &self.config,
            }
        }
    }

    fn fresh() -> Bed {
        let dir = tempfile::tempdir().unwrap();
        let broker = Broker::open(dir.path(), Clock::virtual_at(1_000 * 1_000_000)).unwrap();
        let meta = MetaStore::open(&dir.path().join("meta")).unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        Bed { _dir: dir, broker, meta, store, config: EngineConfig::default() }
    }

    /// Persists `n` two-dimensional rows as a sealed segment with pk = i and
    /// vector [i, 0].
    fn sealed_segment(bed: &mut Bed, schema: &Schema, n: i64) -> SegmentDescriptor {
        let mut rows = SegmentRows::new(schema.clone());
        for i in 0..n {
            let mut e = Entity::new(Some(PkValue::Int(i)), vec![i as f32, 0.0]);
            e.lsn = Some(HlcTimestamp::new(1_000 + i as u64, 0));
            rows.push(&e).unwrap();
        }
        let mut descriptor = SegmentDescriptor::new(9, 1, 0);
        descriptor.state = SegmentState::Sealed;
        descriptor.row_count = rows.len() as u64;
        descriptor.binlog_paths = rows.write_binlogs(&bed.store, 1, 9).unwrap();
        descriptor
    }

    fn knobs() -> SearchKnobs {
        SearchKnobs { nprobe: Some(64), ef_search: Some(64) }
    }

    #[test]
    fn builds_each_kind_and_searches_live_rows() {
        let mut bed = fresh();
        let schema = Schema::simple(2);
        let descriptor = sealed_segment(&mut bed, &schema, 50);
        for kind in [IndexKind::Flat, IndexKind::IvfFlat, IndexKind::Hnsw] {
            let params = IndexParams { kind, ..IndexParams::default_for(Metric::Euclidean) };
            let mut node = IndexNode::new(4);
            let built =
                node.build_segment(&mut bed.ctx(), &schema, &descriptor, &params).unwrap();
            assert_eq!(built.index_kind, kind.name());
            assert_eq!(built.live_rows, 50);
            let index = decode_index(&bed.store.get(&built.index_path).unwrap(), "t").unwrap();
            let hits = index
                .search(&[17.2, 0.0], Metric::Euclidean, 1, &knobs(), &params, &|_| false)
                .unwrap();
            assert_eq!(hits[0].row_id, 17, "{} finds the nearest row", kind.name());
        }
    }

    #[test]
    fn deleted_rows_are_left_out_of_the_build() {
        let mut bed = fresh();
        let schema = Schema::simple(2);
        let descriptor = sealed_segment(&mut bed, &schema, 20);
        deletes::record_deletes(
            &bed.store,
            1,
            9,
            &[(PkValue::Int(7), HlcTimestamp::new(2_000, 0))],
        )
        .unwrap();
        let params = IndexParams::flat(Metric::Euclidean);
        let mut node = IndexNode::new(4);
        let built = node.build_segment(&mut bed.ctx(), &schema, &descriptor, &params).unwrap();
        assert_eq!(built.live_rows, 19);
        let index = decode_index(&bed.store.get(&built.index_path).unwrap(), "t").unwrap();
        let hits = index
            .search(&[7.0, 0.0], Metric::Euclidean, 2, &knobs(), &params, &|_| false)
            .unwrap();
        let ids: Vec<u32> = hits.iter().map(|h| h.row_id).collect();
        assert!(!ids.contains(&7), "deleted row never surfaces: {ids:?}");
        assert!(ids.contains(&6) && ids.contains(&8), "neighbors take its place");
    }

    #[test]
    fn rebuilds_get_fresh_generations() {
        let mut bed = fresh();
        let schema = Schema::simple(2);
        let descriptor = sealed_segment(&mut bed, &schema, 10);
        let params = IndexParams::flat(Metric::Euclidean);
        let mut node = IndexNode::new(4);
        let a = node.build_segment(&mut bed.ctx(), &schema, &descriptor, &params).unwrap();
        let b = node.build_segment(&mut bed.ctx(), &schema, &descriptor, &params).unwrap();
        assert_eq!(a.index_path, "collection/1/segment/9/index/flat-g1.mix");
        assert_eq!(b.index_path, "collection/1/segment/9/index/flat-g2.mix");
        assert_eq!(node.stats().builds_done, 2);
        bed.store.get(&a.index_path).unwrap();
        bed.store.get(&b.index_path).unwrap();
    }

    #[test]
    fn tiny_and_empty_segments_still_build() {
        let mut bed = fresh();
        let schema = Schema::simple(2);
        let descriptor = sealed_segment(&mut bed, &schema, 3);
        // nlist far above the row count clamps instead of failing.
        let params = IndexParams {
            kind: IndexKind::IvfFlat,
            ..IndexParams::default_for(Metric::Euclidean)
        };
        let mut node = IndexNode::new(4);
        let built = node.build_segment(&mut bed.ctx(), &schema, &descriptor, &params).unwrap();
        assert_eq!(built.index_kind, "ivf_flat");

        // Everything deleted: falls back to an empty flat index.
        let all: Vec<(PkValue, HlcTimestamp)> =
            (0..3).map(|i| (PkValue::Int(i), HlcTimestamp::new(2_000, 0))).collect();
        deletes::record_deletes(&bed.store, 1, 9, &all).unwrap();
        let built = node.build_segment(&mut bed.ctx(), &schema, &descriptor, &params).unwrap();
        assert_eq!(built.index_kind, "flat");
        assert_eq!(built.live_rows, 0);
        let index = decode_index(&bed.store.get(&built.index_path).unwrap(), "t").unwrap();
        let hits = index
            .search(&[1.0, 0.0], Metric::Euclidean, 3, &knobs(), &params, &|_| false)
            .unwrap();
        assert!(hits.is_empty());
    }
}
