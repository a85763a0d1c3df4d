//! Coordinators: DDL at the root, the segment registry and merge policy at
//! the data coordinator, build scheduling at the index coordinator, and
//! placement, recovery, and autoscaling at the query coordinator. Each tails
//! the coord channel under its own cursor and keeps durable state in the
//! metadata store; coordinators talk to nodes and to each other only by
//! publishing further coord messages.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use logvec_core::error::{EngineError, Result};
use logvec_core::index::{IndexKind, IndexParams};
use logvec_core::log::{EntryKind, SubscriberPosition, COORD_CHANNEL, DDL_CHANNEL};
use logvec_core::records::{self, CoordMessage, DdlRecord};
use logvec_core::schema::Schema;
use logvec_core::segment::{CollectionId, SegmentDescriptor, SegmentId, ShardId};

use crate::catalog::{self, CollectionInfo};
use crate::config::EngineConfig;
use crate::ctx::Ctx;
use crate::meta::MetaStore;
use crate::proxy::distribution_key;

// ---------------------------------------------------------------------------
// Segment registry: the durable map of every segment the system knows about,
// written only by the data coordinator, read by everyone.

pub fn registry_key(collection_id: CollectionId, segment_id: SegmentId) -> String {
    format!("registry/{collection_id}/{segment_id:012}")
}

pub fn registry_put(meta: &mut MetaStore, descriptor: &SegmentDescriptor) -> Result<()> {
    meta.set_json(&registry_key(descriptor.collection_id, descriptor.segment_id), descriptor)
}

pub fn registry_get(
    meta: &MetaStore,
    collection_id: CollectionId,
    segment_id: SegmentId,
) -> Result<Option<SegmentDescriptor>> {
    meta.get_json(&registry_key(collection_id, segment_id))
}

/// Every registered segment of a collection, ascending by segment id.
pub fn registry_segments(
    meta: &MetaStore,
    collection_id: CollectionId,
) -> Result<Vec<SegmentDescriptor>> {
    let mut out = Vec::new();
    for key in meta.keys_with_prefix(&format!("registry/{collection_id}/")) {
        if let Some(descriptor) = meta.get_json(&key)? {
            out.push(descriptor);
        }
    }
    Ok(out)
}

pub fn registry_drop_collection(meta: &mut MetaStore, collection_id: CollectionId) -> Result<()> {
    for key in meta.keys_with_prefix(&format!("registry/{collection_id}/")) {
        meta.delete(&key)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Root coordinator: data definition.

pub fn create_collection(
    ctx: &mut Ctx,
    name: &str,
    schema: Schema,
    shard_count: u32,
) -> Result<CollectionInfo> {
    if shard_count == 0 {
        return Err(EngineError::InvalidParam("shard count must be at least 1".to_string()));
    }
    schema.check().map_err(EngineError::SchemaViolation)?;
    if catalog::exists(ctx.meta, name) {
        return Err(EngineError::CollectionExists(name.to_string()));
    }
    let collection_id = ctx.meta.next_id("collection", 1)?;
    let info = CollectionInfo {
        collection_id,
        name: name.to_string(),
        schema: schema.clone(),
        shard_count,
    };
    for channel in info.wal_channels() {
        ctx.broker.ensure_channel(&channel)?;
    }
    catalog::save(ctx.meta, &info)?;
    let record =
        DdlRecord::CreateCollection { collection_id, name: name.to_string(), schema, shard_count };
    ctx.broker.publish(DDL_CHANNEL, EntryKind::Ddl, records::encode(&record))?;
    Ok(info)
}

pub fn drop_collection(ctx: &mut Ctx, name: &str) -> Result<CollectionInfo> {
    let info = catalog::by_name(ctx.meta, name)?;
    catalog::remove(ctx.meta, &info)?;
    let record = DdlRecord::DropCollection {
        collection_id: info.collection_id,
        name: name.to_string(),
    };
    ctx.broker.publish(DDL_CHANNEL, EntryKind::Ddl, records::encode(&record))?;
    publish(ctx, &CoordMessage::CollectionDropped { collection_id: info.collection_id })?;
    Ok(info)
}

fn publish(ctx: &mut Ctx, msg: &CoordMessage) -> Result<()> {
    ctx.broker.publish(COORD_CHANNEL, EntryKind::Coord, records::encode(msg))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Data coordinator: keeps the registry current and decides merges.

const DATA_COORD_KEY: &str = "coord/data";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct DataCoordState {
    position: SubscriberPosition,
    /// Inputs of announced merges; excluded from further planning until the
    /// merge lands.
    merge_pending: BTreeSet<SegmentId>,
}

pub struct DataCoord {
    state: DataCoordState,
}

impl DataCoord {
    pub fn open(meta: &MetaStore) -> Result<DataCoord> {
        Ok(DataCoord { state: meta.get_json(DATA_COORD_KEY)?.unwrap_or_default() })
    }

    pub fn save(&self, meta: &mut MetaStore) -> Result<()> {
        meta.set_json(DATA_COORD_KEY, &self.state)
    }

    pub fn pump(&mut self, ctx: &mut Ctx) -> Result<bool> {
        let mut progressed = false;
        loop {
            let batch = self.state.position.consume(ctx.broker, COORD_CHANNEL, 256)?;
            if batch.is_empty() {
                break;
            }
            progressed = true;
            for (_, entry) in batch {
                if entry.kind != EntryKind::Coord {
                    continue;
                }
                self.apply(ctx, records::decode(&entry.payload)?)?;
            }
        }
        Ok(progressed)
    }

    fn apply(&mut self, ctx: &mut Ctx, msg: CoordMessage) -> Result<()> {
        match msg {
            CoordMessage::SegmentSealed { descriptor } => {
                registry_put(ctx.meta, &descriptor)?;
            }
            CoordMessage::MergeSegments { inputs, .. } => {
                self.state.merge_pending.extend(inputs.iter().map(|d| d.segment_id));
            }
            CoordMessage::SegmentsMerged { merged, retired, retired_at } => {
                registry_put(ctx.meta, &merged)?;
                for segment_id in retired {
                    if let Some(mut d) = registry_get(ctx.meta, merged.collection_id, segment_id)? {
                        d.retired_at = Some(retired_at);
                        registry_put(ctx.meta, &d)?;
                    }
                    self.state.merge_pending.remove(&segment_id);
                }
            }
            CoordMessage::IndexBuilt { segment_id, index_kind, index_path } => {
                // The registry key needs the collection; scan is fine at this
                // scale but the descriptor is usually recent, so try the
                // collections in catalog order.
                for info in catalog::all(ctx.meta)? {
                    if let Some(mut d) = registry_get(ctx.meta, info.collection_id, segment_id)? {
                        d.index_paths.insert(index_kind.clone(), index_path.clone());
                        registry_put(ctx.meta, &d)?;
                        break;
                    }
                }
            }
            CoordMessage::CollectionDropped { collection_id } => {
                registry_drop_collection(ctx.meta, collection_id)?;
                self.state.merge_pending.clear();
            }
            _ => {}
        }
        Ok(())
    }

    /// Issue a merge for every shard that accumulated enough small sealed
    /// segments. Returns the number of merges announced.
    pub fn plan_merges(&mut self, ctx: &mut Ctx) -> Result<usize> {
        let small_limit = (ctx.config.seal_rows as f64 * ctx.config.merge_fraction) as u64;
        let mut planned = 0;
        for info in catalog::all(ctx.meta)? {
            let mut by_shard: BTreeMap<ShardId, Vec<SegmentDescriptor>> = BTreeMap::new();
            for d in registry_segments(ctx.meta, info.collection_id)? {
                if d.is_sealed()
                    && d.is_live()
                    && d.row_count < small_limit
                    && !self.state.merge_pending.contains(&d.segment_id)
                {
                    by_shard.entry(d.shard_id).or_default().push(d);
                }
            }
            for (shard_id, inputs) in by_shard {
                if inputs.len() < ctx.config.merge_min_count {
                    continue;
                }
                let new_segment_id = ctx.meta.next_id("segment", 1)?;
                self.state.merge_pending.extend(inputs.iter().map(|d| d.segment_id));
                publish(
                    ctx,
                    &CoordMessage::MergeSegments {
                        collection_id: info.collection_id,
                        shard_id,
                        new_segment_id,
                        inputs,
                    },
                )?;
                planned += 1;
            }
        }
        Ok(planned)
    }
}

// ---------------------------------------------------------------------------
// Index coordinator: one outstanding build task per segment, assigned to the
// least-loaded index node, with bounded retries ending in a flat fallback.

const INDEX_COORD_KEY: &str = "coord/index";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Building { node_id: u64 },
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexTask {
    pub segment_id: SegmentId,
    pub collection_id: CollectionId,
    pub rows: u64,
    pub attempts: u32,
    pub state: TaskState,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct IndexCoordState {
    position: SubscriberPosition,
    tasks: BTreeMap<SegmentId, IndexTask>,
}

pub struct IndexCoord {
    state: IndexCoordState,
}

impl IndexCoord {
    pub fn open(meta: &MetaStore) -> Result<IndexCoord> {
        Ok(IndexCoord { state: meta.get_json(INDEX_COORD_KEY)?.unwrap_or_default() })
    }

    pub fn save(&self, meta: &mut MetaStore) -> Result<()> {
        meta.set_json(INDEX_COORD_KEY, &self.state)
    }

    pub fn task(&self, segment_id: SegmentId) -> Option<&IndexTask> {
        self.state.tasks.get(&segment_id)
    }

    pub fn pending_count(&self) -> usize {
        self.state.tasks.values().filter(|t| t.state == TaskState::Pending).count()
    }

    pub fn pump(&mut self, ctx: &mut Ctx) -> Result<bool> {
        let mut progressed = false;
        loop {
            let batch = self.state.position.consume(ctx.broker, COORD_CHANNEL, 256)?;
            if batch.is_empty() {
                break;
            }
            progressed = true;
            for (_, entry) in batch {
                if entry.kind != EntryKind::Coord {
                    continue;
                }
                self.apply(ctx, records::decode(&entry.payload)?)?;
            }
        }
        Ok(progressed)
    }

    fn enqueue(&mut self, segment_id: SegmentId, collection_id: CollectionId, rows: u64) {
        self.state.tasks.entry(segment_id).or_insert(IndexTask {
            segment_id,
            collection_id,
            rows,
            attempts: 0,
            state: TaskState::Pending,
        });
    }

    fn apply(&mut self, ctx: &mut Ctx, msg: CoordMessage) -> Result<()> {
        match msg {
            CoordMessage::SegmentSealed { descriptor } => {
                self.enqueue(descriptor.segment_id, descriptor.collection_id, descriptor.row_count);
            }
            CoordMessage::SegmentsMerged { merged, retired, .. } => {
                for segment_id in retired {
                    self.state.tasks.remove(&segment_id);
                }
                self.enqueue(merged.segment_id, merged.collection_id, merged.row_count);
            }
            CoordMessage::RebuildIndex { collection_id, segment_id } => {
                let rows = registry_get(ctx.meta, collection_id, segment_id)?
                    .map(|d| d.row_count)
                    .unwrap_or(0);
                self.enqueue(segment_id, collection_id, rows);
            }
            CoordMessage::IndexBuilt { segment_id, .. } => {
                self.state.tasks.remove(&segment_id);
            }
            CoordMessage::CollectionDropped { collection_id } => {
                self.state.tasks.retain(|_, t| t.collection_id != collection_id);
            }
            _ => {}
        }
        Ok(())
    }

    /// Hand every pending task to the least-loaded node (`loads` is node id →
    /// queued rows). Tasks move to `Building`; the caller runs the builds.
    pub fn assign(&mut self, loads: &[(u64, u64)]) -> Vec<(SegmentId, u64)> {
        if loads.is_empty() {
            return Vec::new();
        }
        let mut loads: BTreeMap<u64, u64> = loads.iter().copied().collect();
        let mut out = Vec::new();
        for task in self.state.tasks.values_mut() {
            if task.state != TaskState::Pending {
                continue;
            }
            let (&node_id, _) = loads
                .iter()
                .min_by_key(|(id, rows)| (**rows, **id))
                .expect("checked non-empty");
            *loads.get_mut(&node_id).expect("present") += task.rows;
            task.state = TaskState::Building { node_id };
            out.push((task.segment_id, node_id));
        }
        out
    }

    /// Index params for the task's next attempt: the final retry falls back
    /// to a flat index, the most robust build.
    pub fn params_for(
        &self,
        segment_id: SegmentId,
        configured: &IndexParams,
        retry_limit: u32,
    ) -> IndexParams {
        let attempts = self.state.tasks.get(&segment_id).map(|t| t.attempts).unwrap_or(0);
        let mut params = configured.clone();
        if attempts >= retry_limit && params.kind != IndexKind::Flat {
            params.kind = IndexKind::Flat;
        }
        params
    }

    /// Record a failed build; the task re-queues until it exhausts its
    /// retries (the segment then stays searchable by brute force).
    pub fn on_build_failed(&mut self, segment_id: SegmentId, retry_limit: u32) -> TaskState {
        match self.state.tasks.get_mut(&segment_id) {
            Some(task) => {
                task.attempts += 1;
                task.state = if task.attempts > retry_limit {
                    TaskState::Failed
                } else {
                    TaskState::Pending
                };
                task.state
            }
            None => TaskState::Failed,
        }
    }

    /// Index nodes idle past the deadline with nothing queued or building.
    pub fn reap_idle(
        &self,
        now_ms: u64,
        idle_ms: u64,
        nodes: &[(u64, u64, u64)],
    ) -> Vec<u64> {
        nodes
            .iter()
            .filter(|(node_id, queued, last_active)| {
                *queued == 0
                    && now_ms.saturating_sub(*last_active) >= idle_ms
                    && !self.state.tasks.values().any(|t| {
                        t.state == TaskState::Building { node_id: *node_id }
                    })
            })
            .map(|(node_id, _, _)| *node_id)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Query coordinator: segment placement, mirror ownership, failure recovery,
// rebalancing, and the autoscaling policy.

const QUERY_COORD_KEY: &str = "coord/query";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Placement {
    collection_id: CollectionId,
    shard_id: ShardId,
    /// Hosting nodes; true once the node confirmed the load.
    nodes: BTreeMap<u64, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MirrorOwner {
    collection_id: CollectionId,
    shard_id: ShardId,
    node_id: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct QueryCoordState {
    position: SubscriberPosition,
    placement: BTreeMap<SegmentId, Placement>,
    /// (node, segment) releases to publish once the keyed segment confirms a
    /// load somewhere; how merges and migrations avoid coverage gaps.
    pending_release: BTreeMap<SegmentId, Vec<(u64, SegmentId)>>,
    mirrors: Vec<MirrorOwner>,
    alive: BTreeSet<u64>,
    heartbeats: BTreeMap<u64, u64>,
    latencies: Vec<f64>,
    last_scale_ms: u64,
    unavailable: BTreeSet<CollectionId>,
}

pub struct QueryCoord {
    state: QueryCoordState,
}

impl QueryCoord {
    pub fn open(meta: &MetaStore) -> Result<QueryCoord> {
        Ok(QueryCoord { state: meta.get_json(QUERY_COORD_KEY)?.unwrap_or_default() })
    }

    pub fn save(&self, meta: &mut MetaStore) -> Result<()> {
        meta.set_json(QUERY_COORD_KEY, &self.state)
    }

    pub fn register_node(&mut self, node_id: u64, now_ms: u64) {
        self.state.alive.insert(node_id);
        self.state.heartbeats.insert(node_id, now_ms);
    }

    pub fn alive_nodes(&self) -> Vec<u64> {
        self.state.alive.iter().copied().collect()
    }

    pub fn is_unavailable(&self, collection_id: CollectionId) -> bool {
        self.state.unavailable.contains(&collection_id)
    }

    pub fn mirror_owner(&self, collection_id: CollectionId, shard_id: ShardId) -> Option<u64> {
        self.state
            .mirrors
            .iter()
            .find(|m| m.collection_id == collection_id && m.shard_id == shard_id)
            .map(|m| m.node_id)
    }

    /// Nodes a segment is expected on (loads in flight included).
    pub fn segment_nodes(&self, segment_id: SegmentId) -> Vec<u64> {
        self.state
            .placement
            .get(&segment_id)
            .map(|p| p.nodes.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn record_heartbeat(&mut self, node_id: u64, now_ms: u64) {
        if self.state.alive.contains(&node_id) {
            self.state.heartbeats.insert(node_id, now_ms);
        }
    }

    pub fn dead_nodes(&self, now_ms: u64, config: &EngineConfig) -> Vec<u64> {
        let deadline = config.heartbeat_ms * config.heartbeat_misses as u64;
        self.state
            .alive
            .iter()
            .copied()
            .filter(|n| {
                now_ms.saturating_sub(self.state.heartbeats.get(n).copied().unwrap_or(0))
                    >= deadline
            })
            .collect()
    }

    pub fn pump(&mut self, ctx: &mut Ctx) -> Result<bool> {
        let mut progressed = false;
        loop {
            let batch = self.state.position.consume(ctx.broker, COORD_CHANNEL, 256)?;
            if batch.is_empty() {
                break;
            }
            progressed = true;
            for (_, entry) in batch {
                if entry.kind != EntryKind::Coord {
                    continue;
                }
                self.apply(ctx, records::decode(&entry.payload)?)?;
            }
        }
        Ok(progressed)
    }

    fn apply(&mut self, ctx: &mut Ctx, msg: CoordMessage) -> Result<()> {
        match msg {
            CoordMessage::LoadSegment { node_id, descriptor } => {
                let p = self.state.placement.entry(descriptor.segment_id).or_insert(Placement {
                    collection_id: descriptor.collection_id,
                    shard_id: descriptor.shard_id,
                    nodes: BTreeMap::new(),
                });
                p.nodes.entry(node_id).or_insert(false);
            }
            CoordMessage::SegmentLoadDone { node_id, segment_id } => {
                if let Some(p) = self.state.placement.get_mut(&segment_id) {
                    if let Some(confirmed) = p.nodes.get_mut(&node_id) {
                        *confirmed = true;
                    }
                }
                if let Some(releases) = self.state.pending_release.remove(&segment_id) {
                    for (node, seg) in releases {
                        publish(
                            ctx,
                            &CoordMessage::ReleaseSegment { node_id: node, segment_id: seg },
                        )?;
                    }
                }
            }
            CoordMessage::ReleaseSegment { node_id, segment_id } => {
                if let Some(p) = self.state.placement.get_mut(&segment_id) {
                    p.nodes.remove(&node_id);
                    if p.nodes.is_empty() {
                        self.state.placement.remove(&segment_id);
                    }
                }
            }
            CoordMessage::SegmentsMerged { merged, retired, .. } => {
                let mut releases = Vec::new();
                for segment_id in retired {
                    if let Some(p) = self.state.placement.get(&segment_id) {
                        releases.extend(p.nodes.keys().map(|n| (*n, segment_id)));
                    }
                }
                self.state.pending_release.entry(merged.segment_id).or_default().extend(releases);
            }
            CoordMessage::AssignMirror { node_id, collection_id, shard_id } => {
                match self
                    .state
                    .mirrors
                    .iter_mut()
                    .find(|m| m.collection_id == collection_id && m.shard_id == shard_id)
                {
                    Some(m) => m.node_id = node_id,
                    None => {
                        self.state.mirrors.push(MirrorOwner { collection_id, shard_id, node_id })
                    }
                }
            }
            CoordMessage::ReleaseMirror { node_id, collection_id, shard_id } => {
                self.state.mirrors.retain(|m| {
                    !(m.collection_id == collection_id
                        && m.shard_id == shard_id
                        && m.node_id == node_id)
                });
            }
            CoordMessage::CollectionDropped { collection_id } => {
                let dropped: Vec<SegmentId> = self
                    .state
                    .placement
                    .iter()
                    .filter(|(_, p)| p.collection_id == collection_id)
                    .map(|(sid, _)| *sid)
                    .collect();
                for segment_id in dropped {
                    let p = self.state.placement.remove(&segment_id).expect("collected above");
                    self.state.pending_release.remove(&segment_id);
                    for node_id in p.nodes.keys() {
                        publish(ctx, &CoordMessage::ReleaseSegment { node_id: *node_id, segment_id })?;
                    }
                }
                for m in self.state.mirrors.clone() {
                    if m.collection_id == collection_id {
                        publish(
                            ctx,
                            &CoordMessage::ReleaseMirror {
                                node_id: m.node_id,
                                collection_id,
                                shard_id: m.shard_id,
                            },
                        )?;
                    }
                }
                self.state.mirrors.retain(|m| m.collection_id != collection_id);
                self.state.unavailable.remove(&collection_id);
                ctx.meta.delete(&distribution_key(collection_id))?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Hosted rows per alive node, from the registry's row counts.
    fn load_map(&self, meta: &MetaStore) -> Result<BTreeMap<u64, u64>> {
        let mut rows: BTreeMap<u64, u64> = self.state.alive.iter().map(|n| (*n, 0)).collect();
        for (segment_id, p) in &self.state.placement {
            let count = registry_get(meta, p.collection_id, *segment_id)?
                .map(|d| d.row_count)
                .unwrap_or(0);
            for node in p.nodes.keys() {
                if let Some(r) = rows.get_mut(node) {
                    *r += count;
                }
            }
        }
        Ok(rows)
    }

    fn least_loaded(rows: &BTreeMap<u64, u64>) -> Option<u64> {
        rows.iter().min_by_key(|(id, r)| (**r, **id)).map(|(id, _)| *id)
    }

    /// Place unhosted segments, keep every shard's mirror owned, make one
    /// rebalance move, and refresh the proxies' distribution view. Returns
    /// true if anything was published.
    pub fn maintenance(&mut self, ctx: &mut Ctx) -> Result<bool> {
        let mut acted = false;
        let infos = catalog::all(ctx.meta)?;
        let mut rows = self.load_map(ctx.meta)?;
        for info in &infos {
            let cid = info.collection_id;
            let mut fully_assigned = true;
            for d in registry_segments(ctx.meta, cid)? {
                // Un-indexed sealed segments stay with the growing mirror.
                if !d.is_sealed() || !d.is_live() || d.index_paths.is_empty() {
                    continue;
                }
                if self.state.placement.contains_key(&d.segment_id) {
                    continue;
                }
                match Self::least_loaded(&rows) {
                    Some(node_id) => {
                        *rows.get_mut(&node_id).expect("alive") += d.row_count;
                        self.state.placement.insert(
                            d.segment_id,
                            Placement {
                                collection_id: cid,
                                shard_id: d.shard_id,
                                nodes: [(node_id, false)].into_iter().collect(),
                            },
                        );
                        publish(ctx, &CoordMessage::LoadSegment { node_id, descriptor: d })?;
                        acted = true;
                    }
                    None => fully_assigned = false,
                }
            }
            for shard_id in 0..info.shard_count {
                let owner = self.mirror_owner(cid, shard_id);
                if owner.map(|n| self.state.alive.contains(&n)).unwrap_or(false) {
                    continue;
                }
                match Self::least_loaded(&rows) {
                    Some(node_id) => {
                        publish(
                            ctx,
                            &CoordMessage::AssignMirror { node_id, collection_id: cid, shard_id },
                        )?;
                        match self
                            .state
                            .mirrors
                            .iter_mut()
                            .find(|m| m.collection_id == cid && m.shard_id == shard_id)
                        {
                            Some(m) => m.node_id = node_id,
                            None => self.state.mirrors.push(MirrorOwner {
                                collection_id: cid,
                                shard_id,
                                node_id,
                            }),
                        }
                        acted = true;
                    }
                    None => fully_assigned = false,
                }
            }
            if fully_assigned {
                self.state.unavailable.remove(&cid);
            } else {
                self.state.unavailable.insert(cid);
            }
        }
        acted |= self.rebalance_step(ctx, &rows)?;
        for info in &infos {
            self.write_distribution(ctx, info.collection_id)?;
        }
        Ok(acted)
    }

    /// One migration from the most- to the least-loaded node when the hosted
    /// row ratio exceeds the configured bound. The load goes out now; the
    /// release waits for the load confirmation.
    fn rebalance_step(&mut self, ctx: &mut Ctx, rows: &BTreeMap<u64, u64>) -> Result<bool> {
        if rows.len() < 2 {
            return Ok(false);
        }
        let (&max_node, &max_rows) =
            rows.iter().max_by_key(|(id, r)| (**r, u64::MAX - **id)).expect("non-empty");
        let (&min_node, &min_rows) = rows.iter().min_by_key(|(id, r)| (**r, **id)).expect("non-empty");
        if max_node == min_node
            || (max_rows as f64) <= (min_rows.max(1) as f64) * ctx.config.balance_ratio
        {
            return Ok(false);
        }
        // Smallest confirmed, settled segment on the overloaded node.
        let mut candidate: Option<(u64, SegmentId)> = None;
        for (segment_id, p) in &self.state.placement {
            let settled = p.nodes.len() == 1
                && p.nodes.get(&max_node) == Some(&true)
                && !self.state.pending_release.contains_key(segment_id);
            if !settled {
                continue;
            }
            let count = registry_get(ctx.meta, p.collection_id, *segment_id)?
                .map(|d| d.row_count)
                .unwrap_or(0);
            if candidate.map(|(c, _)| count < c).unwrap_or(true) {
                candidate = Some((count, *segment_id));
            }
        }
        let Some((_, segment_id)) = candidate else { return Ok(false) };
        let p = self.state.placement.get_mut(&segment_id).expect("candidate placed");
        let descriptor = registry_get(ctx.meta, p.collection_id, segment_id)?
            .ok_or(EngineError::Corrupt {
                path: registry_key(p.collection_id, segment_id),
                reason: "placed segment missing from the registry".to_string(),
            })?;
        p.nodes.insert(min_node, false);
        self.state.pending_release.insert(segment_id, vec![(max_node, segment_id)]);
        publish(ctx, &CoordMessage::LoadSegment { node_id: min_node, descriptor })?;
        Ok(true)
    }

    fn write_distribution(&self, ctx: &mut Ctx, collection_id: CollectionId) -> Result<()> {
        let mut nodes: BTreeSet<u64> = BTreeSet::new();
        for p in self.state.placement.values() {
            if p.collection_id == collection_id {
                nodes.extend(p.nodes.keys().copied());
            }
        }
        for m in &self.state.mirrors {
            if m.collection_id == collection_id {
                nodes.insert(m.node_id);
            }
        }
        let nodes: Vec<u64> = nodes.into_iter().collect();
        let key = distribution_key(collection_id);
        if ctx.meta.get_json::<Vec<u64>>(&key)?.as_ref() != Some(&nodes) {
            ctx.meta.set_json(&key, &nodes)?;
        }
        Ok(())
    }

    /// Remove a node (failure or scale-down) and move its responsibilities
    /// to the healthy ones. Collections left with no coverage are flagged
    /// unavailable rather than silently partial.
    pub fn remove_node(&mut self, ctx: &mut Ctx, node_id: u64) -> Result<()> {
        self.state.alive.remove(&node_id);
        self.state.heartbeats.remove(&node_id);
        let rows = self.load_map(ctx.meta)?;
        let orphaned: Vec<SegmentId> = self
            .state
            .placement
            .iter()
            .filter(|(_, p)| p.nodes.contains_key(&node_id))
            .map(|(sid, _)| *sid)
            .collect();
        let mut rows = rows;
        for segment_id in orphaned {
            let p = self.state.placement.get_mut(&segment_id).expect("collected above");
            p.nodes.remove(&node_id);
            let cid = p.collection_id;
            if !p.nodes.is_empty() {
                continue;
            }
            match Self::least_loaded(&rows) {
                Some(target) => {
                    let descriptor = registry_get(ctx.meta, cid, segment_id)?;
                    match descriptor {
                        Some(d) => {
                            *rows.get_mut(&target).expect("alive") += d.row_count;
                            p.nodes.insert(target, false);
                            publish(
                                ctx,
                                &CoordMessage::LoadSegment { node_id: target, descriptor: d },
                            )?;
                        }
                        None => {
                            self.state.placement.remove(&segment_id);
                        }
                    }
                }
                None => {
                    self.state.placement.remove(&segment_id);
                    self.state.unavailable.insert(cid);
                }
            }
        }
        for m in self.state.mirrors.clone() {
            if m.node_id != node_id {
                continue;
            }
            match Self::least_loaded(&rows) {
                Some(target) => {
                    publish(
                        ctx,
                        &CoordMessage::AssignMirror {
                            node_id: target,
                            collection_id: m.collection_id,
                            shard_id: m.shard_id,
                        },
                    )?;
                    for own in self.state.mirrors.iter_mut() {
                        if own.collection_id == m.collection_id && own.shard_id == m.shard_id {
                            own.node_id = target;
                        }
                    }
                }
                None => {
                    self.state.unavailable.insert(m.collection_id);
                    self.state
                        .mirrors
                        .retain(|x| !(x.collection_id == m.collection_id && x.shard_id == m.shard_id));
                }
            }
        }
        self.state.pending_release.retain(|_, pairs| {
            pairs.retain(|(n, _)| *n != node_id);
            !pairs.is_empty()
        });
        for info in catalog::all(ctx.meta)? {
            self.write_distribution(ctx, info.collection_id)?;
        }
        Ok(())
    }

    pub fn record_latency(&mut self, ms: f64) {
        self.state.latencies.push(ms);
        let cap = 256;
        if self.state.latencies.len() > cap {
            let drop = self.state.latencies.len() - cap;
            self.state.latencies.drain(..drop);
        }
    }

    /// Autoscaling policy over the recent latency window: halve below the
    /// low-water mark, double above the high one. Consumes the window when a
    /// decision fires.
    pub fn desired_nodes(&mut self, now_ms: u64, config: &EngineConfig) -> Option<usize> {
        let auto = &config.autoscale;
        if !auto.enabled
            || self.state.latencies.len() < auto.window
            || now_ms.saturating_sub(self.state.last_scale_ms) < auto.interval_ms
        {
            return None;
        }
        let window = &self.state.latencies[self.state.latencies.len() - auto.window..];
        let mean = window.iter().sum::<f64>() / auto.window as f64;
        let alive = self.state.alive.len();
        let target = if mean < auto.low_ms {
            alive.div_ceil(2).max(auto.min_nodes)
        } else if mean > auto.high_ms {
            (alive * 2).min(auto.max_nodes)
        } else {
            return None;
        };
        self.state.latencies.clear();
        self.state.last_scale_ms = now_ms;
        if target == alive {
            None
        } else {
            Some(target)
        }
    }
}
