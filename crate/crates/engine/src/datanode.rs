//! Data node: tails WAL shards into growing segments, seals them into
//! columnar binlogs, routes deletes to the right segment, and executes merges
//! for the data coordinator.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use logvec_core::error::{EngineError, Result};
use logvec_core::hlc::HlcTimestamp;
use logvec_core::log::{EntryKind, LogEntry, SubscriberPosition, COORD_CHANNEL};
use logvec_core::records::{self, CoordMessage, DeleteRecord, InsertRecord};
use logvec_core::ring::wal_channel;
use logvec_core::schema::{PkValue, Schema};
use logvec_core::segment::{
    CollectionId, SealTrigger, SegmentDescriptor, SegmentId, SegmentState, ShardId,
};

use crate::catalog;
use crate::columns::SegmentRows;
use crate::ctx::Ctx;
use crate::deletes;

/// A segment being accumulated from the WAL, plus deletes that raced in
/// before it sealed.
pub struct GrowingSegment {
    pub descriptor: SegmentDescriptor,
    pub rows: SegmentRows,
    pub deletes: Vec<(PkValue, HlcTimestamp)>,
    /// Timestamp of the last applied insert. Inactivity is measured from here
    /// so the logger's rotation check and the watermark check agree.
    pub last_row_ts: HlcTimestamp,
}

struct ShardTail {
    collection_id: CollectionId,
    shard_id: ShardId,
    channel: String,
    schema: Schema,
    position: SubscriberPosition,
    growing: Option<GrowingSegment>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DataNodeStats {
    pub sealed_by_size: u64,
    pub sealed_by_inactivity: u64,
    pub merges: u64,
    pub entries_applied: u64,
}

/// One data node. Shard assignment is the cluster's job; the node just tails
/// whatever it has been attached to.
pub struct DataNode {
    pub node_id: u64,
    shards: BTreeMap<(CollectionId, ShardId), ShardTail>,
    /// Retired segment -> its merge replacement, so deletes published before
    /// a merge but consumed after still land in a live delete log.
    redirects: BTreeMap<SegmentId, SegmentId>,
    stats: DataNodeStats,
}

impl DataNode {
    pub fn new(node_id: u64) -> Self {
        DataNode {
            node_id,
            shards: BTreeMap::new(),
            redirects: BTreeMap::new(),
            stats: DataNodeStats::default(),
        }
    }

    /// Starts tailing one shard from `from_offset`, which must be a segment
    /// boundary (releases of ownership hand back the growing segment's start).
    pub fn attach(
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
        self.shards.insert(
            (collection_id, shard_id),
            ShardTail {
                collection_id,
                shard_id,
                channel,
                schema: schema.clone(),
                position: SubscriberPosition::at(from_offset),
                growing: None,
            },
        );
        Ok(())
    }

    pub fn detach(&mut self, collection_id: CollectionId, shard_id: ShardId) {
        self.shards.remove(&(collection_id, shard_id));
    }

    pub fn drop_collection(&mut self, collection_id: CollectionId) {
        self.shards.retain(|(cid, _), _| *cid != collection_id);
    }

    pub fn attached_shards(&self) -> Vec<(CollectionId, ShardId)> {
        self.shards.keys().cloned().collect()
    }

    pub fn growing(&self, collection_id: CollectionId, shard_id: ShardId) -> Option<&GrowingSegment> {
        self.shards.get(&(collection_id, shard_id)).and_then(|t| t.growing.as_ref())
    }

    pub fn stats(&self) -> DataNodeStats {
        self.stats
    }

    pub fn record_merge_redirects(&mut self, retired: &[SegmentId], merged: SegmentId) {
        for sid in retired {
            self.redirects.insert(*sid, merged);
        }
    }

    /// Applies every available WAL entry on all attached shards and runs the
    /// inactivity check against the advanced watermarks. Returns true when
    /// anything happened.
    pub fn pump(&mut self, ctx: &mut Ctx) -> Result<bool> {
        let mut progressed = false;
        let keys: Vec<(CollectionId, ShardId)> = self.shards.keys().cloned().collect();
        for key in keys {
            loop {
                let tail = self.shards.get_mut(&key).expect("attached");
                let batch = tail.position.consume(ctx.broker, &tail.channel, 256)?;
                if batch.is_empty() {
                    break;
                }
                progressed = true;
                for (offset, entry) in batch {
                    Self::apply_entry(ctx, tail, &self.redirects, &mut self.stats, offset, &entry)?;
                }
            }
            let tail = self.shards.get_mut(&key).expect("attached");
            if Self::idle_seal_due(tail, ctx.config.seal_idle_ms) {
                Self::seal_growing(ctx, tail, &mut self.stats, SealTrigger::Inactivity)?;
                progressed = true;
            }
        }
        Ok(progressed)
    }

    fn apply_entry(
        ctx: &mut Ctx,
        tail: &mut ShardTail,
        redirects: &BTreeMap<SegmentId, SegmentId>,
        stats: &mut DataNodeStats,
        offset: u64,
        entry: &LogEntry,
    ) -> Result<()> {
        match entry.kind {
            EntryKind::Insert => {
                let record: InsertRecord = records::decode(&entry.payload)?;
                let rotate = tail
                    .growing
                    .as_ref()
                    .map_or(true, |g| g.descriptor.segment_id != record.segment_id);
                if rotate {
                    if tail.growing.is_some() {
                        Self::seal_growing(ctx, tail, stats, SealTrigger::Size)?;
                    }
                    let mut descriptor = SegmentDescriptor::new(
                        record.segment_id,
                        tail.collection_id,
                        tail.shard_id,
                    );
                    descriptor.start_offset = offset;
                    descriptor.resume_offset = offset;
                    tail.growing = Some(GrowingSegment {
                        descriptor,
                        rows: SegmentRows::new(tail.schema.clone()),
                        deletes: Vec::new(),
                        last_row_ts: HlcTimestamp::ZERO,
                    });
                }
                let g = tail.growing.as_mut().expect("just ensured");
                let mut entity = record.entity;
                entity.lsn = Some(entry.ts);
                g.rows.push(&entity)?;
                g.last_row_ts = entry.ts;
                g.descriptor.row_count = g.rows.len() as u64;
                g.descriptor.byte_size = g.rows.byte_size();
                g.descriptor.progress = entry.ts;
                g.descriptor.resume_offset = offset + 1;
                g.descriptor.slice_count =
                    (g.rows.len() / ctx.config.slice_rows as usize) as u32;
                stats.entries_applied += 1;
            }
            EntryKind::Delete => {
                let record: DeleteRecord = records::decode(&entry.payload)?;
                let mut target = record.segment_id;
                while let Some(next) = redirects.get(&target) {
                    target = *next;
                }
                let growing_hit = tail
                    .growing
                    .as_mut()
                    .filter(|g| g.descriptor.segment_id == target);
                match growing_hit {
                    Some(g) => {
                        if !g.deletes.iter().any(|(pk, _)| pk == &record.pk) {
                            g.deletes.push((record.pk, entry.ts));
                        }
                        g.descriptor.progress = entry.ts;
                        g.descriptor.resume_offset = offset + 1;
                    }
                    None => {
                        deletes::record_deletes(
                            ctx.store,
                            record.collection_id,
                            target,
                            &[(record.pk, entry.ts)],
                        )?;
                    }
                }
                stats.entries_applied += 1;
            }
            _ => {}
        }
        Ok(())
    }

    fn idle_seal_due(tail: &ShardTail, idle_ms: u64) -> bool {
        match &tail.growing {
            Some(g) if !g.rows.is_empty() => {
                tail.position
                    .last_time_tick
                    .physical_ms()
                    .saturating_sub(g.last_row_ts.physical_ms())
                    >= idle_ms
            }
            _ => false,
        }
    }

    /// Persists the growing segment as columnar binlogs plus its delete log,
    /// then announces the sealed descriptor on the coord channel.
    fn seal_growing(
        ctx: &mut Ctx,
        tail: &mut ShardTail,
        stats: &mut DataNodeStats,
        trigger: SealTrigger,
    ) -> Result<()> {
        let g = match tail.growing.take() {
            Some(g) => g,
            None => return Ok(()),
        };
        let mut descriptor = g.descriptor;
        descriptor.binlog_paths =
            g.rows.write_binlogs(ctx.store, tail.collection_id, descriptor.segment_id)?;
        if !g.deletes.is_empty() {
            descriptor.delete_log_path = deletes::record_deletes(
                ctx.store,
                tail.collection_id,
                descriptor.segment_id,
                &g.deletes,
            )?;
        }
        descriptor.state = SegmentState::Sealed;
        let slice = ctx.config.slice_rows as usize;
        descriptor.slice_count = g.rows.len().div_ceil(slice) as u32;
        match trigger {
            SealTrigger::Inactivity => stats.sealed_by_inactivity += 1,
            _ => stats.sealed_by_size += 1,
        }
        ctx.broker.publish(
            COORD_CHANNEL,
            EntryKind::Coord,
            records::encode(&CoordMessage::SegmentSealed { descriptor }),
        )?;
        Ok(())
    }

    /// Replaces `inputs` with one sealed segment holding their live rows in
    /// original LSN order; row timestamps are preserved for time travel.
    pub fn execute_merge(
        &mut self,
        ctx: &mut Ctx,
        collection_id: CollectionId,
        shard_id: ShardId,
        new_segment_id: SegmentId,
        inputs: &[SegmentDescriptor],
    ) -> Result<SegmentDescriptor> {
        let info = catalog::by_id(ctx.meta, collection_id)?;
        let mut merged = SegmentRows::new(info.schema.clone());
        let mut start_offset = u64::MAX;
        let mut resume_offset = 0u64;
        let mut progress = HlcTimestamp::ZERO;
        for input in inputs {
            let rows = SegmentRows::read_binlogs(ctx.store, &info.schema, &input.binlog_paths)?;
            let dropped: BTreeSet<PkValue> =
                deletes::read_delete_log(ctx.store, collection_id, input.segment_id)?
                    .into_iter()
                    .map(|(pk, _)| pk)
                    .collect();
            for row in 0..rows.len() {
                if !dropped.contains(rows.pk_at(row)) {
                    merged.push(&rows.entity_at(row))?;
                }
            }
            start_offset = start_offset.min(input.start_offset);
            resume_offset = resume_offset.max(input.resume_offset);
            progress = progress.max(input.progress);
        }

        let mut descriptor = SegmentDescriptor::new(new_segment_id, collection_id, shard_id);
        descriptor.state = SegmentState::Sealed;
        descriptor.row_count = merged.len() as u64;
        descriptor.byte_size = merged.byte_size();
        descriptor.progress = progress;
        descriptor.start_offset = if start_offset == u64::MAX { 0 } else { start_offset };
        descriptor.resume_offset = resume_offset;
        descriptor.slice_count = merged.len().div_ceil(ctx.config.slice_rows as usize) as u32;
        descriptor.binlog_paths = merged.write_binlogs(ctx.store, collection_id, new_segment_id)?;

        let retired: Vec<SegmentId> = inputs.iter().map(|d| d.segment_id).collect();
        self.record_merge_redirects(&retired, new_segment_id);
        self.stats.merges += 1;
        let retired_at = ctx.broker.allocate_timestamp();
        ctx.broker.publish(
            COORD_CHANNEL,
            EntryKind::Coord,
            records::encode(&CoordMessage::SegmentsMerged {
                merged: descriptor.clone(),
                retired,
                retired_at,
            }),
        )?;
        Ok(descriptor)
    }
}
