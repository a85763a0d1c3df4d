//! Logger node: the write path's front half. For the shards routed to it,
//! the logger keeps the pk → segment mapping, assigns rows to growing
//! segments, and publishes acknowledged operations to the WAL. Timestamps
//! come from the broker at publish time; an insert's log timestamp is the
//! row's LSN.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use logvec_core::binlog::{self, Column};
use logvec_core::error::{EngineError, Result};
use logvec_core::esmap::EntitySegmentMap;
use logvec_core::hlc::HlcTimestamp;
use logvec_core::log::EntryKind;
use logvec_core::records::{self, DeleteRecord, InsertRecord};
use logvec_core::ring::{shard_of, wal_channel};
use logvec_core::schema::{validate_entity, Entity, PkValue, Validation};
use logvec_core::segment::{CollectionId, SegmentDescriptor, SegmentId, ShardId};
use logvec_core::store::ObjectStore;

use crate::catalog::CollectionInfo;
use crate::columns::entity_body_bytes;
use crate::ctx::Ctx;

#[derive(Debug, Clone, PartialEq)]
pub struct InsertAck {
    pub pk: PkValue,
    pub lsn: HlcTimestamp,
    pub shard_id: ShardId,
    pub segment_id: SegmentId,
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeleteAck {
    pub lsn: HlcTimestamp,
    pub shard_id: ShardId,
    pub offset: u64,
}

/// The growing segment a shard's inserts currently land in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct OpenSegment {
    segment_id: SegmentId,
    rows: u64,
    bytes: u64,
    /// LSN of the last insert assigned here; inactivity is measured from its
    /// physical component, so both ends of the WAL agree on it.
    last_row_ts: HlcTimestamp,
    start_offset: u64,
}

/// Durable per-shard logger state, written on every mapping flush. Keyed by
/// (collection, shard) rather than by logger, so ownership can move.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ShardLogState {
    seg: Option<OpenSegment>,
    /// Channel offset the flushed mapping covers; recovery replays from here.
    replayed_to: u64,
}

fn state_key(collection_id: CollectionId, shard_id: ShardId) -> String {
    format!("logger/shard/{collection_id}/{shard_id}")
}

fn esmap_prefix(collection_id: CollectionId, shard_id: ShardId) -> String {
    format!("collection/{collection_id}/shard/{shard_id}/esmap")
}

struct ShardLog {
    collection_id: CollectionId,
    shard_id: ShardId,
    channel: String,
    esmap: EntitySegmentMap,
    seg: Option<OpenSegment>,
}

pub struct Logger {
    pub node_id: u64,
    shards: BTreeMap<(CollectionId, ShardId), ShardLog>,
    ops_since_flush: u64,
}

impl Logger {
    pub fn new(node_id: u64) -> Logger {
        Logger { node_id, shards: BTreeMap::new(), ops_since_flush: 0 }
    }

    /// Open (or recover) the state of one shard: load the persisted mapping
    /// runs, then replay the WAL suffix past the last flush to rebuild the
    /// memtable and the open segment's counters.
    fn ensure_shard(
        &mut self,
        ctx: &mut Ctx,
        info: &CollectionInfo,
        shard_id: ShardId,
    ) -> Result<()> {
        let key = (info.collection_id, shard_id);
        if self.shards.contains_key(&key) {
            return Ok(());
        }
        let channel = wal_channel(info.collection_id, shard_id);
        let esmap = EntitySegmentMap::open(ctx.store, &esmap_prefix(info.collection_id, shard_id))?;
        let state: ShardLogState = ctx
            .meta
            .get_json(&state_key(info.collection_id, shard_id))?
            .unwrap_or_default();
        let base = ctx.broker.base_offset(&channel)?;
        if state.replayed_to < base {
            return Err(EngineError::LogTrimmed { channel, base });
        }
        let mut sl = ShardLog {
            collection_id: info.collection_id,
            shard_id,
            channel,
            esmap,
            seg: state.seg,
        };
        for (offset, entry) in ctx.broker.read_from(&sl.channel, state.replayed_to, usize::MAX)? {
            match entry.kind {
                EntryKind::Insert => {
                    let record: InsertRecord = records::decode(&entry.payload)?;
                    let pk = record.entity.pk.clone().ok_or_else(|| EngineError::Corrupt {
                        path: sl.channel.clone(),
                        reason: "logged insert without a primary key".to_string(),
                    })?;
                    sl.esmap.insert(pk, record.segment_id);
                    let bytes = entity_body_bytes(&info.schema, &record.entity);
                    let cur_id = sl.seg.map(|s| s.segment_id);
                    if cur_id == Some(record.segment_id) {
                        let seg = sl.seg.as_mut().expect("checked");
                        seg.rows += 1;
                        seg.bytes += bytes;
                        seg.last_row_ts = entry.ts;
                    } else if record.segment_id > cur_id.unwrap_or(0) {
                        sl.seg = Some(OpenSegment {
                            segment_id: record.segment_id,
                            rows: 1,
                            bytes,
                            last_row_ts: entry.ts,
                            start_offset: offset,
                        });
                    }
                }
                EntryKind::Delete => {
                    let record: DeleteRecord = records::decode(&entry.payload)?;
                    sl.esmap.remove(record.pk);
                }
                _ => {}
            }
        }
        self.shards.insert(key, sl);
        Ok(())
    }

    pub fn handle_insert(
        &mut self,
        ctx: &mut Ctx,
        info: &CollectionInfo,
        mut entity: Entity,
    ) -> Result<InsertAck> {
        let pk = entity.pk.clone().ok_or_else(|| {
            EngineError::InvalidParam("logger requires an assigned primary key".to_string())
        })?;
        if let Validation::Violations(v) = validate_entity(&info.schema, &entity) {
            return Err(EngineError::SchemaViolation(v));
        }
        let shard_id = shard_of(&pk, info.shard_count);
        self.ensure_shard(ctx, info, shard_id)?;
        let sl = self.shards.get_mut(&(info.collection_id, shard_id)).expect("just ensured");

        if sl.esmap.contains(&pk) {
            return Err(EngineError::DuplicatePk(pk.to_string()));
        }

        let now_ms = ctx.broker.clock().now_ms();
        let need_new = match &sl.seg {
            None => true,
            Some(s) => {
                s.rows >= ctx.config.seal_rows
                    || s.bytes >= ctx.config.seal_bytes
                    || now_ms.saturating_sub(s.last_row_ts.physical_ms())
                        >= ctx.config.seal_idle_ms
            }
        };
        if need_new {
            let segment_id = ctx.meta.next_id("segment", 1)?;
            let start_offset = ctx.broker.channel_len(&sl.channel)?;
            sl.seg = Some(OpenSegment {
                segment_id,
                rows: 0,
                bytes: 0,
                last_row_ts: HlcTimestamp::ZERO,
                start_offset,
            });
        }
        let seg = sl.seg.as_mut().expect("opened above");
        let segment_id = seg.segment_id;

        entity.lsn = None;
        let record = InsertRecord {
            collection_id: info.collection_id,
            shard_id,
            segment_id,
            entity,
        };
        let bytes = entity_body_bytes(&info.schema, &record.entity);
        let published =
            ctx.broker.publish(&sl.channel, EntryKind::Insert, records::encode(&record))?;
        seg.rows += 1;
        seg.bytes += bytes;
        seg.last_row_ts = published.ts;
        sl.esmap.insert(pk.clone(), segment_id);

        self.ops_since_flush += 1;
        if self.ops_since_flush >= ctx.config.flush_mapping_every {
            self.flush_mappings(ctx)?;
        }
        Ok(InsertAck {
            pk,
            lsn: published.ts,
            shard_id,
            segment_id,
            offset: published.offset,
        })
    }

    pub fn handle_delete(
        &mut self,
        ctx: &mut Ctx,
        info: &CollectionInfo,
        pk: &PkValue,
    ) -> Result<DeleteAck> {
        let shard_id = shard_of(pk, info.shard_count);
        self.ensure_shard(ctx, info, shard_id)?;
        let sl = self.shards.get_mut(&(info.collection_id, shard_id)).expect("just ensured");
        let segment_id = match sl.esmap.lookup(pk) {
            Some(seg) => seg,
            None => return Err(EngineError::UnknownPk(pk.to_string())),
        };
        let record =
            DeleteRecord { collection_id: info.collection_id, shard_id, segment_id, pk: pk.clone() };
        let published =
            ctx.broker.publish(&sl.channel, EntryKind::Delete, records::encode(&record))?;
        sl.esmap.remove(pk.clone());
        self.ops_since_flush += 1;
        if self.ops_since_flush >= ctx.config.flush_mapping_every {
            self.flush_mappings(ctx)?;
        }
        Ok(DeleteAck { lsn: published.ts, shard_id, offset: published.offset })
    }

    /// Persist every shard's memtable as a sorted run and record the covered
    /// channel offset, so recovery replays only the suffix.
    pub fn flush_mappings(&mut self, ctx: &mut Ctx) -> Result<()> {
        for sl in self.shards.values_mut() {
            sl.esmap.flush(ctx.store)?;
            let state = ShardLogState {
                seg: sl.seg,
                replayed_to: ctx.broker.channel_len(&sl.channel)?,
            };
            ctx.meta.set_json(&state_key(sl.collection_id, sl.shard_id), &state)?;
        }
        self.ops_since_flush = 0;
        Ok(())
    }

    /// After a merge replaced segments, re-point surviving pks at the merged
    /// segment. Presence-conditional: a pk deleted since the merge started
    /// keeps its tombstone.
    pub fn apply_merged(
        &mut self,
        ctx: &mut Ctx,
        info: &CollectionInfo,
        merged: &SegmentDescriptor,
    ) -> Result<()> {
        self.ensure_shard(ctx, info, merged.shard_id)?;
        let sl = self
            .shards
            .get_mut(&(info.collection_id, merged.shard_id))
            .expect("just ensured");
        let key = merged.binlog_paths.get(binlog::PK_COLUMN).ok_or_else(|| {
            EngineError::Corrupt {
                path: format!("segment {}", merged.segment_id),
                reason: "merged descriptor lists no pk binlog".to_string(),
            }
        })?;
        let bytes = ctx.store.get(key)?;
        let kind = binlog::column_kind(&info.schema, binlog::PK_COLUMN)
            .expect("pk column always exists");
        let (_, column) = binlog::decode(&bytes, kind, key)?;
        let pks: Vec<PkValue> = match column {
            Column::Int64(v) => v.into_iter().map(PkValue::Int).collect(),
            Column::Utf8(v) => v.into_iter().map(PkValue::Str).collect(),
            _ => {
                return Err(EngineError::Corrupt {
                    path: key.clone(),
                    reason: "pk binlog holds a non-key column".to_string(),
                })
            }
        };
        for pk in pks {
            if sl.esmap.contains(&pk) {
                sl.esmap.insert(pk, merged.segment_id);
            }
        }
        Ok(())
    }

    pub fn drop_collection(&mut self, collection_id: CollectionId) {
        self.shards.retain(|(cid, _), _| *cid != collection_id);
    }

    /// (collection, shard, open segment id, rows in it) per open shard.
    pub fn shard_stats(&self) -> Vec<(CollectionId, ShardId, Option<SegmentId>, u64)> {
        self.shards
            .values()
            .map(|sl| {
                (
                    sl.collection_id,
                    sl.shard_id,
                    sl.seg.map(|s| s.segment_id),
                    sl.seg.map(|s| s.rows).unwrap_or(0),
                )
            })
            .collect()
    }

    pub fn mapping_lookup(
        &mut self,
        ctx: &mut Ctx,
        info: &CollectionInfo,
        pk: &PkValue,
    ) -> Result<Option<SegmentId>> {
        let shard_id = shard_of(pk, info.shard_count);
        self.ensure_shard(ctx, info, shard_id)?;
        Ok(self.shards[&(info.collection_id, shard_id)].esmap.lookup(pk))
    }
}

/// Purge one collection's mapping runs from the object store (used by drop).
pub fn purge_mappings(store: &ObjectStore, collection_id: CollectionId) -> Result<()> {
    for key in store.list(&format!("collection/{collection_id}/shard/"))? {
        store.delete(&key)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use logvec_core::clock::Clock;
    use logvec_core::log::Broker;
    use logvec_core::schema::Schema;

    use crate::config::EngineConfig;
    use crate::meta::MetaStore;

    struct Bed {
        _dir: tempfile::TempDir,
        broker: Broker,
        meta: MetaStore,
        store: ObjectStore,
        config: EngineConfig,
    }

    fn small_config() -> EngineConfig {
        EngineConfig {
            seal_rows: 4,
            seal_bytes: 1 << 30,
            seal_idle_ms: 10_000,
            flush_mapping_every: 5,
            ..EngineConfig::default()
        }
    }

    fn bed_at(dir: tempfile::TempDir, start_ms: u64, config: EngineConfig) -> Bed {
        let clock = Clock::virtual_at(start_ms * 1_000_000);
        let mut broker = Broker::open(dir.path(), clock).unwrap();
        broker.ensure_channel(&wal_channel(1, 0)).unwrap();
        let meta = MetaStore::open(&dir.path().join("meta")).unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        Bed { _dir: dir, broker, meta, store, config }
    }

    fn fresh() -> Bed {
        bed_at(tempfile::tempdir().unwrap(), 1_000, small_config())
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

    fn info() -> CollectionInfo {
        CollectionInfo {
            collection_id: 1,
            name: "t".to_string(),
            schema: Schema::simple(2),
            shard_count: 1,
        }
    }

    fn row(pk: i64) -> Entity {
        Entity::new(Some(PkValue::Int(pk)), vec![pk as f32, 1.0])
    }

    #[test]
    fn inserts_fill_segments_to_the_exact_row_threshold() {
        let mut bed = fresh();
        let info = info();
        let mut logger = Logger::new(7);
        let acks: Vec<InsertAck> = (0..10)
            .map(|pk| logger.handle_insert(&mut bed.ctx(), &info, row(pk)).unwrap())
            .collect();
        let segs: Vec<SegmentId> = acks.iter().map(|a| a.segment_id).collect();
        assert_eq!(segs[0..4].iter().collect::<std::collections::BTreeSet<_>>().len(), 1);
        assert_ne!(segs[3], segs[4], "row threshold rotates after exactly 4 rows");
        assert_eq!(segs[4..8].iter().collect::<std::collections::BTreeSet<_>>().len(), 1);
        assert_ne!(segs[7], segs[8]);
        assert!(acks.windows(2).all(|w| w[1].lsn > w[0].lsn));
        assert_eq!(acks.iter().map(|a| a.offset).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn duplicate_pk_is_rejected_until_deleted() {
        let mut bed = fresh();
        let info = info();
        let mut logger = Logger::new(7);
        logger.handle_insert(&mut bed.ctx(), &info, row(5)).unwrap();
        assert!(matches!(
            logger.handle_insert(&mut bed.ctx(), &info, row(5)),
            Err(EngineError::DuplicatePk(_))
        ));
        logger.handle_delete(&mut bed.ctx(), &info, &PkValue::Int(5)).unwrap();
        logger.handle_insert(&mut bed.ctx(), &info, row(5)).unwrap();
    }

    #[test]
    fn delete_of_unknown_pk_errors() {
        let mut bed = fresh();
        let info = info();
        let mut logger = Logger::new(7);
        assert!(matches!(
            logger.handle_delete(&mut bed.ctx(), &info, &PkValue::Int(3)),
            Err(EngineError::UnknownPk(_))
        ));
    }

    #[test]
    fn pk_less_entity_is_refused() {
        let mut bed = fresh();
        let info = info();
        let mut logger = Logger::new(7);
        let e = Entity::new(None, vec![0.0, 0.0]);
        assert!(logger.handle_insert(&mut bed.ctx(), &info, e).is_err());
    }

    #[test]
    fn idle_shard_rotates_to_a_fresh_segment() {
        let mut bed = fresh();
        let info = info();
        let mut logger = Logger::new(7);
        let a = logger.handle_insert(&mut bed.ctx(), &info, row(1)).unwrap();
        let b = logger.handle_insert(&mut bed.ctx(), &info, row(2)).unwrap();
        assert_eq!(a.segment_id, b.segment_id);
        bed.broker.clock().advance_to_ns((1_000 + 10_000) * 1_000_000);
        let c = logger.handle_insert(&mut bed.ctx(), &info, row(3)).unwrap();
        assert_ne!(b.segment_id, c.segment_id);
    }

    #[test]
    fn byte_threshold_rotates() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config();
        config.seal_rows = 1_000_000;
        config.seal_bytes = 2 * (8 + 8 + 8); // fits two rows of simple(2)
        let mut bed = bed_at(dir, 1_000, config);
        let info = info();
        let mut logger = Logger::new(7);
        let acks: Vec<InsertAck> = (0..5)
            .map(|pk| logger.handle_insert(&mut bed.ctx(), &info, row(pk)).unwrap())
            .collect();
        assert_eq!(acks[0].segment_id, acks[1].segment_id);
        assert_ne!(acks[1].segment_id, acks[2].segment_id);
        assert_eq!(acks[2].segment_id, acks[3].segment_id);
        assert_ne!(acks[3].segment_id, acks[4].segment_id);
    }

    // Restart oracle: a fresh logger over the same durable state must reject
    // duplicates that were never flushed and keep filling the same segment.
    #[test]
    fn restart_recovers_mapping_and_counters() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        let info = info();
        {
            let clock = Clock::virtual_at(1_000 * 1_000_000);
            let mut broker = Broker::open(dir.path(), clock).unwrap();
            broker.ensure_channel(&wal_channel(1, 0)).unwrap();
            let mut meta = MetaStore::open(&dir.path().join("meta")).unwrap();
            let store = ObjectStore::open(dir.path()).unwrap();
            let mut logger = Logger::new(7);
            for pk in 0..7 {
                let mut ctx =
                    Ctx { broker: &mut broker, meta: &mut meta, store: &store, config: &config };
                logger.handle_insert(&mut ctx, &info, row(pk)).unwrap();
            }
            // flush_mapping_every = 5 fired once; pks 5 and 6 are memtable-only.
        }
        let clock = Clock::virtual_at(1_000 * 1_000_000);
        let mut broker = Broker::open(dir.path(), clock).unwrap();
        let mut meta = MetaStore::open(&dir.path().join("meta")).unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let mut logger = Logger::new(8);
        let mut ctx = Ctx { broker: &mut broker, meta: &mut meta, store: &store, config: &config };
        assert!(matches!(
            logger.handle_insert(&mut ctx, &info, row(6)),
            Err(EngineError::DuplicatePk(_))
        ));
        // The second segment held rows 4..6 (3 rows); one more fills it to 4.
        let a = logger.handle_insert(&mut ctx, &info, row(7)).unwrap();
        let b = logger.handle_insert(&mut ctx, &info, row(8)).unwrap();
        assert_ne!(a.segment_id, b.segment_id, "row 7 fills the segment, row 8 rotates");
    }

    #[test]
    fn merge_repoints_live_pks_and_preserves_tombstones() {
        let mut bed = fresh();
        let info = info();
        let mut logger = Logger::new(7);
        let a1 = logger.handle_insert(&mut bed.ctx(), &info, row(1)).unwrap();
        logger.handle_insert(&mut bed.ctx(), &info, row(2)).unwrap();
        logger.handle_delete(&mut bed.ctx(), &info, &PkValue::Int(2)).unwrap();

        // Fake a merged segment whose pk column still lists both rows.
        let mut rows = crate::columns::SegmentRows::new(info.schema.clone());
        for pk in [1i64, 2] {
            let mut e = row(pk);
            e.lsn = Some(HlcTimestamp::new(1, 0));
            rows.push(&e).unwrap();
        }
        let paths = rows.write_binlogs(&bed.store, info.collection_id, 99).unwrap();
        let mut merged = SegmentDescriptor::new(99, info.collection_id, 0);
        merged.binlog_paths = paths;

        logger.apply_merged(&mut bed.ctx(), &info, &merged).unwrap();
        assert_eq!(
            logger.mapping_lookup(&mut bed.ctx(), &info, &PkValue::Int(1)).unwrap(),
            Some(99)
        );
        assert_eq!(
            logger.mapping_lookup(&mut bed.ctx(), &info, &PkValue::Int(2)).unwrap(),
            None,
            "tombstone survives the repoint"
        );
        let _ = a1;
    }
}
