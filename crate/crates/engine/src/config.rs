//! Engine tunables. Every knob the CLI config file documents lives here;
//! defaults are desk-scale.

use logvec_core::index::IndexParams;
use serde::{Deserialize, Serialize};

/// Virtual-time cost model for simulated work: `base + per_row × rows`
/// nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub base_ns: u64,
    pub per_row_ns: u64,
}

impl CostModel {
    pub fn cost_ns(&self, rows: u64) -> u64 {
        self.base_ns + self.per_row_ns * rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoscaleConfig {
    pub enabled: bool,
    /// Halve query nodes when windowed mean latency drops under this.
    pub low_ms: f64,
    /// Double query nodes when it exceeds this.
    pub high_ms: f64,
    /// Latency samples considered per decision.
    pub window: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Decision cadence.
    pub interval_ms: u64,
}

impl Default for AutoscaleConfig {
    fn default() -> AutoscaleConfig {
        AutoscaleConfig {
            enabled: false,
            low_ms: 100.0,
            high_ms: 150.0,
            window: 32,
            min_nodes: 1,
            max_nodes: 16,
            interval_ms: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Seal a growing segment at this many rows…
    pub seal_rows: u64,
    /// …or this many buffered bytes, whichever first.
    pub seal_bytes: u64,
    /// …or after this long without an insert.
    pub seal_idle_ms: u64,
    /// Rows per slice of a growing segment; full slices get temporary
    /// indexes.
    pub slice_rows: usize,
    /// Time-tick (watermark) cadence.
    pub tick_interval_ms: u64,
    /// Staleness tolerance applied when a search does not specify one;
    /// `None` means eventual consistency.
    pub default_tau_ms: Option<u64>,
    /// Index built for sealed segments.
    pub index: IndexParams,
    /// Deleted fraction at which a segment's index is rebuilt over live rows.
    pub rebuild_threshold: f64,
    /// Post-filter oversampling factor for attribute-filtered searches.
    pub oversample: usize,
    /// Merge sealed segments when at least this many on one shard…
    pub merge_min_count: usize,
    /// …are each under this fraction of the seal size.
    pub merge_fraction: f64,
    /// Rebalance until max/min hosted rows across query nodes is ≤ this.
    pub balance_ratio: f64,
    pub heartbeat_ms: u64,
    /// Heartbeats missed before a node is declared dead.
    pub heartbeat_misses: u32,
    /// A query node that answers nothing for this long fails the search.
    pub node_timeout_ms: u64,
    pub autoscale: AutoscaleConfig,
    /// Checkpoint when this many WAL entries accumulated since the last one…
    pub checkpoint_entries: u64,
    /// …or this much time passed, whichever first.
    pub checkpoint_interval_ms: u64,
    /// Flush the pk→segment memtable every this many logged operations.
    pub flush_mapping_every: u64,
    /// SSD bucket index block size.
    pub bucket_cap: u32,
    /// Index nodes idle this long get reaped.
    pub index_idle_ms: u64,
    pub index_retry_limit: u32,
    /// Logical positions on the logger hash ring.
    pub ring_buckets: u32,
    /// Virtual cost of a search on one query node, per hosted row scanned.
    pub search_cost: CostModel,
    /// Virtual cost of building one segment index, per row.
    pub build_cost: CostModel,
}

impl Default for EngineConfig {
    fn default() -> EngineConfig {
        EngineConfig {
            seal_rows: 4096,
            seal_bytes: 1 << 20,
            seal_idle_ms: 10_000,
            slice_rows: 256,
            tick_interval_ms: 50,
            default_tau_ms: Some(100),
            index: IndexParams::default_for(logvec_core::Metric::Euclidean),
            rebuild_threshold: 0.2,
            oversample: 4,
            merge_min_count: 4,
            merge_fraction: 0.25,
            balance_ratio: 1.5,
            heartbeat_ms: 500,
            heartbeat_misses: 3,
            node_timeout_ms: 1_000,
            autoscale: AutoscaleConfig::default(),
            checkpoint_entries: 1_000,
            checkpoint_interval_ms: 10_000,
            flush_mapping_every: 1_000,
            bucket_cap: 4096,
            index_idle_ms: 30_000,
            index_retry_limit: 3,
            ring_buckets: 64,
            search_cost: CostModel { base_ns: 200_000, per_row_ns: 1_000 },
            build_cost: CostModel { base_ns: 1_000_000, per_row_ns: 10_000 },
        }
    }
}

impl EngineConfig {
    pub fn tick_interval_ns(&self) -> u64 {
        self.tick_interval_ms * 1_000_000
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.seal_rows == 0 || self.seal_bytes == 0 || self.slice_rows == 0 {
            return Err("seal thresholds and slice size must be positive".into());
        }
        if self.tick_interval_ms == 0 {
            return Err("tick interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.rebuild_threshold) {
            return Err("rebuild threshold must be within [0, 1]".into());
        }
        if self.balance_ratio < 1.0 {
            return Err("balance ratio must be at least 1".into());
        }
        if self.autoscale.min_nodes == 0 || self.autoscale.max_nodes < self.autoscale.min_nodes {
            return Err("autoscale node bounds are inverted".into());
        }
        self.index.validate().map_err(|e| e.to_string())
    }
}
