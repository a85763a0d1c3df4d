//! Query node: hosts sealed segments behind their indexes, mirrors growing
//! segments straight off the WAL, applies deletes to bitmaps, and answers
//! local top-k searches under the staleness guard.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use logvec_core::error::{EngineError, Result};
use logvec_core::filter::FilterExpr;
use logvec_core::hlc::HlcTimestamp;
use logvec_core::index::persist::decode_index;
use logvec_core::index::{
    flat, segment_search, DeleteBitmap, IndexKind, IndexParams, SearchKnobs, VectorIndex,
};
use logvec_core::log::{EntryKind, LogEntry, SubscriberPosition, COORD_CHANNEL};
use logvec_core::metric::Metric;
use logvec_core::records::{self, CoordMessage, DeleteRecord, InsertRecord};
use logvec_core::ring::wal_channel;
use logvec_core::schema::{PkValue, Schema};
use logvec_core::segment::{CollectionId, SegmentDescriptor, SegmentId, ShardId};

use crate::columns::SegmentRows;
use crate::ctx::Ctx;
use crate::deletes;

/// One query against one node. `read_ts` is the request's read timestamp:
/// rows with a larger LSN are invisible.
pub struct SearchSpec<'a> {
    pub collection_id: CollectionId,
    pub vector: &'a [f32],
    pub k: usize,
    pub metric: Metric,
    pub read_ts: HlcTimestamp,
    pub filter: Option<&'a FilterExpr>,
    pub params: &'a IndexParams,
    pub knobs: SearchKnobs,
    pub oversample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPk {
    pub pk: PkValue,
    pub score: f32,
}

#[derive(Debug, Clone, Default)]
pub struct LocalSearch {
    pub hits: Vec<ScoredPk>,
    pub rows_scanned: u64,
}

/// Better-first ordering: score in the metric's direction, pk breaks ties.
pub fn hit_order(metric: Metric, a: &ScoredPk, b: &ScoredPk) -> Ordering {
    let by_score = if metric.lower_is_better() {
        a.score.total_cmp(&b.score)
    } else {
        b.score.total_cmp(&a.score)
    };
    by_score.then_with(|| a.pk.cmp(&b.pk))
}

/// Sort by rank, then keep the best entry per pk.
pub fn dedup_ranked(metric: Metric, hits: &mut Vec<ScoredPk>) {
    hits.sort_by(|a, b| hit_order(metric, a, b));
    let mut seen = BTreeSet::new();
    hits.retain(|h| seen.insert(h.pk.clone()));
}

struct MirrorSegment {
    rows: SegmentRows,
    deleted: BTreeSet<PkValue>,
}

#[derive(Default)]
struct Mirror {
    segments: BTreeMap<SegmentId, MirrorSegment>,
}

pub struct HostedSegment {
    pub descriptor: SegmentDescriptor,
    rows: SegmentRows,
    pk_pos: BTreeMap<PkValue, u32>,
    index: Option<VectorIndex>,
    bitmap: DeleteBitmap,
    /// Deletes already reflected in the loaded index; the rebuild trigger
    /// fires on the fraction that accumulated since.
    deletes_at_build: u32,
    rebuild_requested: bool,
}

impl HostedSegment {
    pub fn live_rows(&self) -> u64 {
        self.rows.len() as u64 - u64::from(self.bitmap.deleted_count())
    }

    pub fn deleted_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        f64::from(self.bitmap.deleted_count()) / self.rows.len() as f64
    }

    pub fn index_kind(&self) -> Option<IndexKind> {
        self.index.as_ref().map(|i| i.kind())
    }
}

pub struct QueryNode {
    pub node_id: u64,
    hosted: BTreeMap<SegmentId, HostedSegment>,
    mirrors: BTreeMap<(CollectionId, ShardId), Mirror>,
    mirror_subs: BTreeMap<(CollectionId, ShardId), SubscriberPosition>,
    delete_subs: BTreeMap<(CollectionId, ShardId), SubscriberPosition>,
    schemas: BTreeMap<CollectionId, Schema>,
    redirects: BTreeMap<SegmentId, SegmentId>,
    last_applied: BTreeMap<(CollectionId, ShardId), HlcTimestamp>,
}

impl QueryNode {
    pub fn new(node_id: u64) -> QueryNode {
        QueryNode {
            node_id,
            hosted: BTreeMap::new(),
            mirrors: BTreeMap::new(),
            mirror_subs: BTreeMap::new(),
            delete_subs: BTreeMap::new(),
            schemas: BTreeMap::new(),
            redirects: BTreeMap::new(),
            last_applied: BTreeMap::new(),
        }
    }

    /// Takes over the growing mirror for one shard, replaying the WAL from
    /// `from_offset` (the earliest unhosted segment's start).
    pub fn assign_mirror(
        &mut self,
        ctx: &Ctx,
        collection_id: CollectionId,
        schema: &Schema,
        shard_id: ShardId,
        from_offset: u64,
    ) -> Result<()> {
        let channel = wal_channel(collection_id, shard_id);
        if !ctx.broker.has_channel(&channel) {
            return Err(EngineError::UnknownChannel(channel));
        }
        self.schemas.insert(collection_id, schema.clone());
        let key = (collection_id, shard_id);
        self.mirrors.entry(key).or_default();
        self.mirror_subs.insert(key, SubscriberPosition::at(from_offset));
        Ok(())
    }

    pub fn release_mirror(&mut self, collection_id: CollectionId, shard_id: ShardId) {
        let key = (collection_id, shard_id);
        self.mirrors.remove(&key);
        self.mirror_subs.remove(&key);
    }

    pub fn owns_mirror(&self, collection_id: CollectionId, shard_id: ShardId) -> bool {
        self.mirror_subs.contains_key(&(collection_id, shard_id))
    }

    /// Drops mirrored rows for a segment (and everything merged into it)
    /// once some node hosts it.
    pub fn mirror_discard(&mut self, segment_id: SegmentId) {
        let terminal: Vec<SegmentId> = self
            .mirrors
            .values()
            .flat_map(|m| m.segments.keys().copied())
            .filter(|sid| *sid == segment_id || self.redirect_terminal(*sid) == segment_id)
            .collect();
        for mirror in self.mirrors.values_mut() {
            mirror.segments.retain(|sid, _| !terminal.contains(sid));
        }
    }

    pub fn record_redirects(&mut self, retired: &[SegmentId], merged: SegmentId) {
        for sid in retired {
            self.redirects.insert(*sid, merged);
        }
    }

    fn redirect_terminal(&self, segment_id: SegmentId) -> SegmentId {
        let mut sid = segment_id;
        while let Some(next) = self.redirects.get(&sid) {
            sid = *next;
        }
        sid
    }

    /// Loads a sealed segment: rows from binlogs, the delete bitmap from the
    /// delete log plus a WAL backfill (covering deletes the data node has not
    /// flushed yet), and the preferred index when one is recorded.
    pub fn load_segment(
        &mut self,
        ctx: &Ctx,
        schema: &Schema,
        descriptor: &SegmentDescriptor,
        preferred: IndexKind,
    ) -> Result<()> {
        let rows = SegmentRows::read_binlogs(ctx.store, schema, &descriptor.binlog_paths)?;
        let mut pk_pos = BTreeMap::new();
        for row in 0..rows.len() {
            pk_pos.insert(rows.pk_at(row).clone(), row as u32);
        }
        let mut bitmap = DeleteBitmap::new(rows.len() as u32);
        let logged =
            deletes::read_delete_log(ctx.store, descriptor.collection_id, descriptor.segment_id)?;
        for (pk, _) in logged {
            if let Some(pos) = pk_pos.get(&pk) {
                bitmap.set(*pos);
            }
        }

        let channel = wal_channel(descriptor.collection_id, descriptor.shard_id);
        let end = ctx.broker.channel_len(&channel)?;
        let from = descriptor.resume_offset.max(ctx.broker.base_offset(&channel)?);
        if from < end {
            for (_, entry) in ctx.broker.read_from(&channel, from, (end - from) as usize)? {
                if entry.kind != EntryKind::Delete {
                    continue;
                }
                let record: DeleteRecord = records::decode(&entry.payload)?;
                let target = record.segment_id;
                if target == descriptor.segment_id
                    || self.redirect_terminal(target) == descriptor.segment_id
                {
                    if let Some(pos) = pk_pos.get(&record.pk) {
                        bitmap.set(*pos);
                    }
                }
            }
        }

        let path = descriptor
            .index_paths
            .get(preferred.name())
            .or_else(|| descriptor.index_paths.values().next());
        let index = match path {
            Some(p) => Some(decode_index(&ctx.store.get(p)?, p)?),
            None => None,
        };

        self.schemas.insert(descriptor.collection_id, schema.clone());
        let key = (descriptor.collection_id, descriptor.shard_id);
        self.delete_subs.entry(key).or_insert_with(|| SubscriberPosition::at(end));
        self.last_applied
            .entry(key)
            .and_modify(|ts| *ts = (*ts).max(descriptor.progress))
            .or_insert(descriptor.progress);
        let deletes_at_build = bitmap.deleted_count();
        self.hosted.insert(
            descriptor.segment_id,
            HostedSegment {
                descriptor: descriptor.clone(),
                rows,
                pk_pos,
                index,
                bitmap,
                deletes_at_build,
                rebuild_requested: false,
            },
        );
        Ok(())
    }

    pub fn release_segment(&mut self, segment_id: SegmentId) -> bool {
        let dropped = self.hosted.remove(&segment_id).is_some();
        if dropped {
            let still_needed: BTreeSet<(CollectionId, ShardId)> = self
                .hosted
                .values()
                .map(|h| (h.descriptor.collection_id, h.descriptor.shard_id))
                .collect();
            self.delete_subs.retain(|key, _| still_needed.contains(key));
        }
        dropped
    }

    /// Swaps in a freshly built index for a hosted segment.
    pub fn swap_index(&mut self, ctx: &Ctx, segment_id: SegmentId, index_path: &str) -> Result<bool> {
        let seg = match self.hosted.get_mut(&segment_id) {
            Some(seg) => seg,
            None => return Ok(false),
        };
        seg.index = Some(decode_index(&ctx.store.get(index_path)?, index_path)?);
        seg.descriptor
            .index_paths
            .insert(seg.index.as_ref().expect("just set").kind().name().to_string(), index_path.to_string());
        seg.deletes_at_build = seg.bitmap.deleted_count();
        seg.rebuild_requested = false;
        Ok(true)
    }

    pub fn drop_collection(&mut self, collection_id: CollectionId) {
        self.hosted.retain(|_, h| h.descriptor.collection_id != collection_id);
        self.mirrors.retain(|(cid, _), _| *cid != collection_id);
        self.mirror_subs.retain(|(cid, _), _| *cid != collection_id);
        self.delete_subs.retain(|(cid, _), _| *cid != collection_id);
        self.schemas.remove(&collection_id);
        self.last_applied.retain(|(cid, _), _| *cid != collection_id);
    }

    pub fn hosted_segment(&self, segment_id: SegmentId) -> Option<&HostedSegment> {
        self.hosted.get(&segment_id)
    }

    pub fn hosted_ids(&self) -> Vec<SegmentId> {
        self.hosted.keys().copied().collect()
    }

    pub fn hosted_live_rows(&self) -> u64 {
        self.hosted.values().map(|h| h.live_rows()).sum()
    }

    pub fn mirror_rows(&self, collection_id: CollectionId, shard_id: ShardId) -> u64 {
        self.mirrors
            .get(&(collection_id, shard_id))
            .map_or(0, |m| m.segments.values().map(|s| s.rows.len() as u64).sum())
    }

    /// Applies every available WAL entry on all cursors. Returns true when
    /// anything moved.
    pub fn pump(&mut self, ctx: &mut Ctx) -> Result<bool> {
        let mut progressed = false;
        let mirror_keys: Vec<(CollectionId, ShardId)> = self.mirror_subs.keys().cloned().collect();
        for key in mirror_keys {
            let channel = wal_channel(key.0, key.1);
            loop {
                let batch = {
                    let sub = self.mirror_subs.get_mut(&key).expect("present");
                    sub.consume(ctx.broker, &channel, 256)?
                };
                if batch.is_empty() {
                    break;
                }
                progressed = true;
                for (_, entry) in &batch {
                    self.apply_mirror_entry(key, entry)?;
                }
            }
        }
        let delete_keys: Vec<(CollectionId, ShardId)> = self.delete_subs.keys().cloned().collect();
        for key in delete_keys {
            let channel = wal_channel(key.0, key.1);
            loop {
                let batch = {
                    let sub = self.delete_subs.get_mut(&key).expect("present");
                    sub.consume(ctx.broker, &channel, 256)?
                };
                if batch.is_empty() {
                    break;
                }
                progressed = true;
                for (_, entry) in &batch {
                    self.apply_hosted_entry(ctx, key, entry)?;
                }
            }
        }
        Ok(progressed)
    }

    fn note_applied(&mut self, key: (CollectionId, ShardId), ts: HlcTimestamp) {
        self.last_applied
            .entry(key)
            .and_modify(|cur| *cur = (*cur).max(ts))
            .or_insert(ts);
    }

    fn apply_mirror_entry(
        &mut self,
        key: (CollectionId, ShardId),
        entry: &LogEntry,
    ) -> Result<()> {
        match entry.kind {
            EntryKind::Insert => {
                let record: InsertRecord = records::decode(&entry.payload)?;
                self.note_applied(key, entry.ts);
                let schema = self
                    .schemas
                    .get(&key.0)
                    .cloned()
                    .ok_or(EngineError::UnknownCollection(key.0.to_string()))?;
                let mirror = self.mirrors.entry(key).or_default();
                let ms = mirror.segments.entry(record.segment_id).or_insert_with(|| {
                    MirrorSegment { rows: SegmentRows::new(schema), deleted: BTreeSet::new() }
                });
                let mut entity = record.entity;
                entity.lsn = Some(entry.ts);
                ms.rows.push(&entity)?;
            }
            EntryKind::Delete => {
                let record: DeleteRecord = records::decode(&entry.payload)?;
                self.note_applied(key, entry.ts);
                if let Some(mirror) = self.mirrors.get_mut(&key) {
                    if let Some(ms) = mirror.segments.get_mut(&record.segment_id) {
                        ms.deleted.insert(record.pk);
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn apply_hosted_entry(
        &mut self,
        ctx: &mut Ctx,
        key: (CollectionId, ShardId),
        entry: &LogEntry,
    ) -> Result<()> {
        if entry.kind != EntryKind::Delete {
            if entry.kind == EntryKind::Insert {
                self.note_applied(key, entry.ts);
            }
            return Ok(());
        }
        let record: DeleteRecord = records::decode(&entry.payload)?;
        self.note_applied(key, entry.ts);
        let mut targets = vec![record.segment_id];
        let terminal = self.redirect_terminal(record.segment_id);
        if terminal != record.segment_id {
            targets.push(terminal);
        }
        for sid in targets {
            let seg = match self.hosted.get_mut(&sid) {
                Some(seg) => seg,
                None => continue,
            };
            let pos = match seg.pk_pos.get(&record.pk) {
                Some(pos) => *pos,
                None => continue,
            };
            seg.bitmap.set(pos);
            let base = seg.rows.len() as u32 - seg.deletes_at_build;
            let fresh = seg.bitmap.deleted_count() - seg.deletes_at_build;
            let due = base > 0
                && f64::from(fresh) / f64::from(base) >= ctx.config.rebuild_threshold;
            if due && !seg.rebuild_requested {
                seg.rebuild_requested = true;
                let msg = CoordMessage::RebuildIndex {
                    collection_id: seg.descriptor.collection_id,
                    segment_id: sid,
                };
                ctx.broker.publish(COORD_CHANNEL, EntryKind::Coord, records::encode(&msg))?;
            }
        }
        Ok(())
    }

    /// How many more milliseconds of watermark advance this node needs before
    /// a read at `read_ts` under `tau_ms` may proceed. Zero means go.
    pub fn staleness_gap_ms(
        &self,
        collection_id: CollectionId,
        read_ts: HlcTimestamp,
        tau_ms: Option<u64>,
    ) -> u64 {
        let tau = match tau_ms {
            None => return 0,
            Some(t) => t,
        };
        let mut keys: BTreeSet<(CollectionId, ShardId)> = BTreeSet::new();
        keys.extend(self.mirror_subs.keys().filter(|(cid, _)| *cid == collection_id));
        keys.extend(self.delete_subs.keys().filter(|(cid, _)| *cid == collection_id));
        let mut worst = 0u64;
        for key in keys {
            let mut watermark = self.last_applied.get(&key).copied().unwrap_or(HlcTimestamp::ZERO);
            if let Some(sub) = self.mirror_subs.get(&key) {
                watermark = watermark.max(sub.last_time_tick);
            }
            if let Some(sub) = self.delete_subs.get(&key) {
                watermark = watermark.max(sub.last_time_tick);
            }
            let gap = read_ts.physical_ms() as i64 - watermark.physical_ms() as i64;
            if gap >= tau as i64 {
                worst = worst.max((gap - tau as i64 + 1) as u64);
            }
        }
        worst
    }

    /// Local top-k over every hosted segment and mirror of the collection.
    pub fn search_local(&self, spec: &SearchSpec) -> Result<LocalSearch> {
        let mut all: Vec<ScoredPk> = Vec::new();
        let mut rows_scanned = 0u64;
        for seg in self.hosted.values() {
            if seg.descriptor.collection_id != spec.collection_id {
                continue;
            }
            rows_scanned += seg.rows.len() as u64;
            all.extend(Self::search_hosted(seg, spec)?);
        }
        for ((cid, _), mirror) in &self.mirrors {
            if *cid != spec.collection_id {
                continue;
            }
            for ms in mirror.segments.values() {
                rows_scanned += ms.rows.len() as u64;
                all.extend(Self::search_mirror(ms, spec)?);
            }
        }
        dedup_ranked(spec.metric, &mut all);
        all.truncate(spec.k);
        Ok(LocalSearch { hits: all, rows_scanned })
    }

    fn search_hosted(seg: &HostedSegment, spec: &SearchSpec) -> Result<Vec<ScoredPk>> {
        let rows = &seg.rows;
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        if spec.vector.len() != rows.primary_dim() {
            return Err(EngineError::DimensionMismatch {
                expected: rows.primary_dim(),
                got: spec.vector.len(),
            });
        }
        // Index path: sound only when every row predates the read timestamp.
        if rows.max_lsn() <= spec.read_ts {
            if let Some(index) = &seg.index {
                let attr_holder;
                let attr: Option<&dyn Fn(u32) -> bool> = match spec.filter {
                    Some(expr) => {
                        attr_holder = move |row: u32| rows.matches_row(expr, row as usize);
                        Some(&attr_holder)
                    }
                    None => None,
                };
                let hits = segment_search(
                    index,
                    spec.vector,
                    spec.metric,
                    spec.k,
                    &spec.knobs,
                    spec.params,
                    Some(&seg.bitmap),
                    attr,
                    spec.oversample,
                )?;
                return Ok(hits
                    .into_iter()
                    .map(|h| ScoredPk { pk: rows.pk_at(h.row_id as usize).clone(), score: h.score })
                    .collect());
            }
        }
        // Straddling or index-less: exact scan with full visibility checks.
        let exclude = |row: u32| {
            let r = row as usize;
            seg.bitmap.is_deleted(row)
                || rows.lsn_at(r) > spec.read_ts
                || spec.filter.map_or(false, |e| !rows.matches_row(e, r))
        };
        let hits = flat::brute_force(
            rows.primary_vectors(),
            rows.primary_dim(),
            spec.vector,
            spec.metric,
            spec.k,
            &exclude,
        );
        Ok(hits
            .into_iter()
            .map(|h| ScoredPk { pk: rows.pk_at(h.row_id as usize).clone(), score: h.score })
            .collect())
    }

    fn search_mirror(ms: &MirrorSegment, spec: &SearchSpec) -> Result<Vec<ScoredPk>> {
        let rows = &ms.rows;
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        if spec.vector.len() != rows.primary_dim() {
            return Err(EngineError::DimensionMismatch {
                expected: rows.primary_dim(),
                got: spec.vector.len(),
            });
        }
        let exclude = |row: u32| {
            let r = row as usize;
            rows.lsn_at(r) > spec.read_ts
                || ms.deleted.contains(rows.pk_at(r))
                || spec.filter.map_or(false, |e| !rows.matches_row(e, r))
        };
        let hits = flat::brute_force(
            rows.primary_vectors(),
            rows.primary_dim(),
            spec.vector,
            spec.metric,
            spec.k,
            &exclude,
        );
        Ok(hits
            .into_iter()
            .map(|h| ScoredPk { pk: rows.pk_at(h.row_id as usize).clone(), score: h.score })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use logvec_core::clock::Clock;
    use logvec_core::log::Broker;
    use logvec_core::schema::Entity;
    use logvec_core::store::ObjectStore;

    use crate::catalog::{self, CollectionInfo};
    use crate::config::EngineConfig;
    use crate::datanode::DataNode;
    use crate::indexnode::IndexNode;
    use crate::logger::Logger;
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
        let clock = Clock::virtual_at(1_000 * 1_000_000);
        let mut broker = Broker::open(dir.path(), clock).unwrap();
        broker.ensure_channel(&wal_channel(1, 0)).unwrap();
        broker.ensure_channel(COORD_CHANNEL).unwrap();
        let mut meta = MetaStore::open(&dir.path().join("meta")).unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        catalog::save(&mut meta, &info()).unwrap();
        let config = EngineConfig {
            seal_rows: 4,
            seal_bytes: 1 << 30,
            seal_idle_ms: 10_000,
            slice_rows: 2,
            flush_mapping_every: 1_000,
            ..EngineConfig::default()
        };
        Bed { _dir: dir, broker, meta, store, config }
    }

    fn info() -> CollectionInfo {
        CollectionInfo {
            collection_id: 1,
            name: "t".to_string(),
            schema: Schema::simple(2),
            shard_count: 1,
        }
    }

    fn row(pk: i64) -> Entity {
        Entity::new(Some(PkValue::Int(pk)), vec![pk as f32, 0.0])
    }

    fn spec<'a>(bed: &'a Bed, vector: &'a [f32], k: usize, read_ts: HlcTimestamp) -> SearchSpec<'a> {
        SearchSpec {
            collection_id: 1,
            vector,
            k,
            metric: Metric::Euclidean,
            read_ts,
            filter: None,
            params: &bed.config.index,
            knobs: SearchKnobs { nprobe: None, ef_search: None },
            oversample: bed.config.oversample,
        }
    }

    /// Drives logger + data node until one segment seals, then builds its
    /// index and returns the load-ready descriptor.
    fn sealed_descriptor(bed: &mut Bed, logger: &mut Logger, dnode: &mut DataNode, n: i64) -> SegmentDescriptor {
        let info = info();
        for pk in 0..n {
            logger.handle_insert(&mut bed.ctx(), &info, row(pk)).unwrap();
        }
        dnode.pump(&mut bed.ctx()).unwrap();
        let len = bed.broker.channel_len(COORD_CHANNEL).unwrap();
        let mut descriptor = bed
            .broker
            .read_from(COORD_CHANNEL, 0, len as usize)
            .unwrap()
            .into_iter()
            .filter(|(_, e)| e.kind == EntryKind::Coord)
            .find_map(|(_, e)| match records::decode(&e.payload).unwrap() {
                CoordMessage::SegmentSealed { descriptor } => Some(descriptor),
                _ => None,
            })
            .expect("a segment sealed");
        let mut inode = IndexNode::new(9);
        let params = bed.config.index.clone();
        let built =
            inode.build_segment(&mut bed.ctx(), &info.schema, &descriptor, &params).unwrap();
        descriptor.index_paths.insert(built.index_kind, built.index_path);
        descriptor
    }

    #[test]
    fn mirror_follows_the_wal_and_answers_exactly() {
        let mut bed = fresh();
        let info = info();
        let mut logger = Logger::new(1);
        let mut node = QueryNode::new(5);
        node.assign_mirror(&bed.ctx(), 1, &info.schema, 0, 0).unwrap();
        let acks: Vec<_> =
            (0..3).map(|pk| logger.handle_insert(&mut bed.ctx(), &info, row(pk)).unwrap()).collect();
        node.pump(&mut bed.ctx()).unwrap();
        assert_eq!(node.mirror_rows(1, 0), 3);

        let read_ts = bed.broker.allocate_timestamp();
        let got = node.search_local(&spec(&bed, &[1.2, 0.0], 2, read_ts)).unwrap();
        let pks: Vec<PkValue> = got.hits.iter().map(|h| h.pk.clone()).collect();
        assert_eq!(pks, vec![PkValue::Int(1), PkValue::Int(2)]);

        // Reading at the first row's timestamp hides the later rows.
        let got = node.search_local(&spec(&bed, &[1.2, 0.0], 2, acks[0].lsn)).unwrap();
        let pks: Vec<PkValue> = got.hits.iter().map(|h| h.pk.clone()).collect();
        assert_eq!(pks, vec![PkValue::Int(0)], "rows after the read ts are invisible");

        // Mirror deletes hide rows.
        logger.handle_delete(&mut bed.ctx(), &info, &PkValue::Int(1)).unwrap();
        node.pump(&mut bed.ctx()).unwrap();
        let read_ts = bed.broker.allocate_timestamp();
        let got = node.search_local(&spec(&bed, &[1.2, 0.0], 2, read_ts)).unwrap();
        let pks: Vec<PkValue> = got.hits.iter().map(|h| h.pk.clone()).collect();
        assert_eq!(pks, vec![PkValue::Int(2), PkValue::Int(0)]);
    }

    #[test]
    fn staleness_guard_waits_for_watermarks() {
        let mut bed = fresh();
        let info = info();
        let mut logger = Logger::new(1);
        let mut node = QueryNode::new(5);
        node.assign_mirror(&bed.ctx(), 1, &info.schema, 0, 0).unwrap();
        logger.handle_insert(&mut bed.ctx(), &info, row(0)).unwrap();
        node.pump(&mut bed.ctx()).unwrap();

        let read_ts = bed.broker.allocate_timestamp();
        // Bounded staleness: the applied insert shares the read's physical ms.
        assert_eq!(node.staleness_gap_ms(1, read_ts, Some(100)), 0);
        assert_eq!(node.staleness_gap_ms(1, read_ts, None), 0);
        // Strong reads need the watermark strictly past the read timestamp.
        assert_eq!(node.staleness_gap_ms(1, read_ts, Some(0)), 1);

        bed.broker.clock().advance_to_ns(1_001 * 1_000_000);
        bed.broker.tick_all().unwrap();
        node.pump(&mut bed.ctx()).unwrap();
        assert_eq!(node.staleness_gap_ms(1, read_ts, Some(0)), 0);

        // A node with no coverage of the collection never waits.
        let idle = QueryNode::new(6);
        assert_eq!(idle.staleness_gap_ms(1, read_ts, Some(0)), 0);
    }

    #[test]
    fn hosted_segment_serves_index_and_straddling_paths() {
        let mut bed = fresh();
        let info = info();
        let mut logger = Logger::new(1);
        let mut dnode = DataNode::new(2);
        dnode.attach(&bed.ctx(), 1, &info.schema, 0, 0).unwrap();
        let descriptor = sealed_descriptor(&mut bed, &mut logger, &mut dnode, 5);

        let mut node = QueryNode::new(5);
        let kind = bed.config.index.kind;
        node.load_segment(&bed.ctx(), &info.schema, &descriptor, kind).unwrap();
        let read_ts = bed.broker.allocate_timestamp();
        let got = node.search_local(&spec(&bed, &[2.1, 0.0], 2, read_ts)).unwrap();
        let pks: Vec<PkValue> = got.hits.iter().map(|h| h.pk.clone()).collect();
        assert_eq!(pks, vec![PkValue::Int(2), PkValue::Int(3)]);
        assert_eq!(got.rows_scanned, 4);

        // Straddling read: only rows at or before the second row's LSN.
        let hosted = node.hosted_segment(descriptor.segment_id).unwrap();
        let cutoff = hosted.rows.lsn_at(1);
        let got = node.search_local(&spec(&bed, &[3.0, 0.0], 4, cutoff)).unwrap();
        let pks: Vec<PkValue> = got.hits.iter().map(|h| h.pk.clone()).collect();
        assert_eq!(pks, vec![PkValue::Int(1), PkValue::Int(0)]);
    }

    #[test]
    fn deletes_tail_into_bitmaps_and_request_one_rebuild() {
        let mut bed = fresh();
        let info = info();
        let mut logger = Logger::new(1);
        let mut dnode = DataNode::new(2);
        dnode.attach(&bed.ctx(), 1, &info.schema, 0, 0).unwrap();
        let descriptor = sealed_descriptor(&mut bed, &mut logger, &mut dnode, 5);

        let mut node = QueryNode::new(5);
        let kind = bed.config.index.kind;
        node.load_segment(&bed.ctx(), &info.schema, &descriptor, kind).unwrap();

        logger.handle_delete(&mut bed.ctx(), &info, &PkValue::Int(2)).unwrap();
        node.pump(&mut bed.ctx()).unwrap();
        let hosted = node.hosted_segment(descriptor.segment_id).unwrap();
        assert_eq!(hosted.live_rows(), 3);

        let read_ts = bed.broker.allocate_timestamp();
        let got = node.search_local(&spec(&bed, &[2.1, 0.0], 1, read_ts)).unwrap();
        assert_eq!(got.hits[0].pk, PkValue::Int(3), "deleted row never surfaces");

        // 1/4 deleted crosses the 0.2 threshold: exactly one rebuild request.
        let len = bed.broker.channel_len(COORD_CHANNEL).unwrap();
        let rebuilds = bed
            .broker
            .read_from(COORD_CHANNEL, 0, len as usize)
            .unwrap()
            .into_iter()
            .filter(|(_, e)| e.kind == EntryKind::Coord)
            .filter(|(_, e)| {
                matches!(
                    records::decode::<CoordMessage>(&e.payload).unwrap(),
                    CoordMessage::RebuildIndex { .. }
                )
            })
            .count();
        assert_eq!(rebuilds, 1);

        logger.handle_delete(&mut bed.ctx(), &info, &PkValue::Int(1)).unwrap();
        node.pump(&mut bed.ctx()).unwrap();
        let len = bed.broker.channel_len(COORD_CHANNEL).unwrap();
        let rebuilds = bed
            .broker
            .read_from(COORD_CHANNEL, 0, len as usize)
            .unwrap()
            .into_iter()
            .filter(|(_, e)| e.kind == EntryKind::Coord)
            .filter(|(_, e)| {
                matches!(
                    records::decode::<CoordMessage>(&e.payload).unwrap(),
                    CoordMessage::RebuildIndex { .. }
                )
            })
            .count();
        assert_eq!(rebuilds, 1, "request latches until the index is rebuilt");
    }

    #[test]
    fn mirror_and_host_overlap_deduplicates_then_discards() {
        let mut bed = fresh();
        let info = info();
        let mut logger = Logger::new(1);
        let mut dnode = DataNode::new(2);
        dnode.attach(&bed.ctx(), 1, &info.schema, 0, 0).unwrap();

        let mut node = QueryNode::new(5);
        node.assign_mirror(&bed.ctx(), 1, &info.schema, 0, 0).unwrap();
        let descriptor = sealed_descriptor(&mut bed, &mut logger, &mut dnode, 5);
        node.pump(&mut bed.ctx()).unwrap();
        assert_eq!(node.mirror_rows(1, 0), 5, "mirror covers sealed-but-unhosted rows");

        let kind = bed.config.index.kind;
        node.load_segment(&bed.ctx(), &info.schema, &descriptor, kind).unwrap();
        let read_ts = bed.broker.allocate_timestamp();
        let got = node.search_local(&spec(&bed, &[0.9, 0.0], 3, read_ts)).unwrap();
        let pks: Vec<PkValue> = got.hits.iter().map(|h| h.pk.clone()).collect();
        assert_eq!(
            pks,
            vec![PkValue::Int(1), PkValue::Int(0), PkValue::Int(2)],
            "overlap between mirror and host never duplicates a pk"
        );

        node.mirror_discard(descriptor.segment_id);
        assert_eq!(node.mirror_rows(1, 0), 1, "only the still-growing row remains");
        let got = node.search_local(&spec(&bed, &[0.9, 0.0], 3, read_ts)).unwrap();
        assert_eq!(got.hits.len(), 3);
    }

    #[test]
    fn filters_narrow_every_path() {
        let mut bed = fresh();
        let mut schema = Schema::simple(2);
        schema.label_fields.push("parity".to_string());
        let info = CollectionInfo {
            collection_id: 1,
            name: "t".to_string(),
            schema: schema.clone(),
            shard_count: 1,
        };
        catalog::save(&mut bed.meta, &info).unwrap();

        let mut logger = Logger::new(1);
        let mut dnode = DataNode::new(2);
        dnode.attach(&bed.ctx(), 1, &schema, 0, 0).unwrap();
        let mut node = QueryNode::new(5);
        node.assign_mirror(&bed.ctx(), 1, &schema, 0, 0).unwrap();

        for pk in 0..6 {
            let mut e = Entity::new(Some(PkValue::Int(pk)), vec![pk as f32, 0.0]);
            e.labels.insert("parity".into(), if pk % 2 == 0 { "even" } else { "odd" }.into());
            logger.handle_insert(&mut bed.ctx(), &info, e).unwrap();
        }
        dnode.pump(&mut bed.ctx()).unwrap();
        node.pump(&mut bed.ctx()).unwrap();

        let expr = FilterExpr::parse("parity = \"odd\"", &schema).unwrap();
        let read_ts = bed.broker.allocate_timestamp();
        let mut s = spec(&bed, &[0.0, 0.0], 4, read_ts);
        s.filter = Some(&expr);
        let got = node.search_local(&s).unwrap();
        let pks: Vec<PkValue> = got.hits.iter().map(|h| h.pk.clone()).collect();
        assert_eq!(pks, vec![PkValue::Int(1), PkValue::Int(3), PkValue::Int(5)]);
    }
}
