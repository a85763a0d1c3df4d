//! Segment descriptors: the unit of data placement and indexing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::hlc::HlcTimestamp;

pub type SegmentId = u64;
pub type CollectionId = u64;
pub type ShardId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentState {
    Growing,
    Sealed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SealTrigger {
    Size,
    Inactivity,
    Merge,
}

/// Placement and progress metadata for one segment. Sealed descriptors are
/// immutable apart from index paths and retirement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDescriptor {
    pub segment_id: SegmentId,
    pub collection_id: CollectionId,
    pub shard_id: ShardId,
    pub state: SegmentState,
    pub row_count: u64,
    pub byte_size: u64,
    /// Highest WAL timestamp applied to this segment; nondecreasing.
    pub progress: HlcTimestamp,
    /// Channel offset of the segment's first WAL entry.
    pub start_offset: u64,
    /// Channel offset replay resumes from: the start while growing, one past
    /// the last applied entry once sealed.
    pub resume_offset: u64,
    pub slice_count: u32,
    /// Per-field object keys, populated once sealed.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub binlog_paths: BTreeMap<String, String>,
    /// Object key of the persisted delete log, if any deletes were flushed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delete_log_path: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub index_paths: BTreeMap<String, String>,
    /// Set when a merge replaced this segment; kept for time travel until GC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retired_at: Option<HlcTimestamp>,
}

impl SegmentDescriptor {
    pub fn new(segment_id: SegmentId, collection_id: CollectionId, shard_id: ShardId) -> Self {
        SegmentDescriptor {
            segment_id,
            collection_id,
            shard_id,
            state: SegmentState::Growing,
            row_count: 0,
            byte_size: 0,
            progress: HlcTimestamp::ZERO,
            start_offset: 0,
            resume_offset: 0,
            slice_count: 0,
            binlog_paths: BTreeMap::new(),
            delete_log_path: None,
            index_paths: BTreeMap::new(),
            retired_at: None,
        }
    }

    pub fn is_sealed(&self) -> bool {
        self.state == SegmentState::Sealed
    }

    pub fn is_live(&self) -> bool {
        self.retired_at.is_none()
    }

    pub fn advance_progress(&mut self, ts: HlcTimestamp) {
        if ts > self.progress {
            self.progress = ts;
        }
    }
}
