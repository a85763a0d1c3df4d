//! Typed payloads carried inside log entries. The broker moves opaque bytes;
//! these are the records the components agree on, serialized as JSON.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hlc::HlcTimestamp;
use crate::schema::{Entity, PkValue, Schema};
use crate::segment::{CollectionId, SegmentDescriptor, SegmentId, ShardId};

/// One acknowledged insert on a WAL channel. The entry's log timestamp is
/// the row's LSN; the logger has already picked the target segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertRecord {
    pub collection_id: CollectionId,
    pub shard_id: ShardId,
    pub segment_id: SegmentId,
    pub entity: Entity,
}

/// One acknowledged delete on a WAL channel; applies to every segment of the
/// collection that holds the pk, at the entry's log timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeleteRecord {
    pub collection_id: CollectionId,
    pub shard_id: ShardId,
    /// Segment the pk mapped to when the delete was accepted.
    pub segment_id: SegmentId,
    pub pk: PkValue,
}

/// Data-definition operations, on their own channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DdlRecord {
    CreateCollection {
        collection_id: CollectionId,
        name: String,
        schema: Schema,
        shard_count: u32,
    },
    DropCollection {
        collection_id: CollectionId,
        name: String,
    },
}

/// Coordination messages, on the coord channel. Coordinators and nodes never
/// share mutable state; everything they tell each other rides here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CoordMessage {
    /// Data node finished writing binlogs for a sealed segment.
    SegmentSealed { descriptor: SegmentDescriptor },
    /// Data coordinator asks the owning data node to merge small sealed
    /// segments into a fresh one.
    MergeSegments {
        collection_id: CollectionId,
        shard_id: ShardId,
        new_segment_id: SegmentId,
        inputs: Vec<SegmentDescriptor>,
    },
    /// Data node replaced source segments with the merged one.
    SegmentsMerged {
        merged: SegmentDescriptor,
        retired: Vec<SegmentId>,
        retired_at: HlcTimestamp,
    },
    /// A hosting query node observed the segment's deleted fraction crossing
    /// the rebuild threshold.
    RebuildIndex {
        collection_id: CollectionId,
        segment_id: SegmentId,
    },
    /// Index node finished building; the object is in the store.
    IndexBuilt {
        segment_id: SegmentId,
        index_kind: String,
        index_path: String,
    },
    /// Query coordinator tells a query node to host a sealed segment.
    LoadSegment {
        node_id: u64,
        descriptor: SegmentDescriptor,
    },
    /// Query node confirms the segment is searchable on it.
    SegmentLoadDone {
        node_id: u64,
        segment_id: SegmentId,
    },
    /// Query coordinator releases a segment from a node (after the
    /// destination confirmed its load, so coverage never gaps).
    ReleaseSegment {
        node_id: u64,
        segment_id: SegmentId,
    },
    /// Query coordinator hands a shard's growing mirror to a node.
    AssignMirror {
        node_id: u64,
        collection_id: CollectionId,
        shard_id: ShardId,
    },
    ReleaseMirror {
        node_id: u64,
        collection_id: CollectionId,
        shard_id: ShardId,
    },
    CollectionDropped { collection_id: CollectionId },
}

pub fn encode<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("record serialization cannot fail")
}

pub fn decode<T: for<'de> Deserialize<'de>>(payload: &[u8]) -> Result<T> {
    serde_json::from_slice(payload).map_err(|e| crate::error::EngineError::Corrupt {
        path: "<log payload>".to_string(),
        reason: e.to_string(),
    })
}
