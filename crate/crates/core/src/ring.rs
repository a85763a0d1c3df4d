//! Consistent-hash ring for loggers: a fixed set of logical buckets, each
//! owned by exactly one logger via rendezvous (highest-random-weight)
//! hashing, so membership changes only move buckets belonging to the logger
//! that joined or departed. Primary keys hash to shards; shards hash to
//! buckets.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::schema::PkValue;
use crate::segment::ShardId;

pub const DEFAULT_RING_BUCKETS: u32 = 64;

/// FNV-1a, used everywhere routing needs a hash that is stable across runs
/// and builds.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Canonical hashable form of a primary key (tagged so int 1 and "1" never
/// collide).
pub fn pk_bytes(pk: &PkValue) -> Vec<u8> {
    match pk {
        PkValue::Int(v) => {
            let mut out = Vec::with_capacity(9);
            out.push(0);
            out.extend_from_slice(&v.to_le_bytes());
            out
        }
        PkValue::Str(s) => {
            let mut out = Vec::with_capacity(1 + s.len());
            out.push(1);
            out.extend_from_slice(s.as_bytes());
            out
        }
    }
}

pub fn shard_of(pk: &PkValue, shard_count: u32) -> ShardId {
    assert!(shard_count > 0);
    (stable_hash(&pk_bytes(pk)) % shard_count as u64) as ShardId
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashRing {
    bucket_count: u32,
    loggers: BTreeSet<u64>,
}

impl HashRing {
    pub fn new(bucket_count: u32) -> HashRing {
        assert!(bucket_count > 0);
        HashRing { bucket_count, loggers: BTreeSet::new() }
    }

    pub fn bucket_count(&self) -> u32 {
        self.bucket_count
    }

    pub fn loggers(&self) -> impl Iterator<Item = u64> + '_ {
        self.loggers.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.loggers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loggers.is_empty()
    }

    pub fn add_logger(&mut self, logger_id: u64) -> bool {
        self.loggers.insert(logger_id)
    }

    pub fn remove_logger(&mut self, logger_id: u64) -> bool {
        self.loggers.remove(&logger_id)
    }

    /// Owner of one logical bucket: the logger with the highest rendezvous
    /// weight for it.
    pub fn bucket_owner(&self, bucket: u32) -> Result<u64> {
        let mut best: Option<(u64, u64)> = None;
        for &logger in &self.loggers {
            let mut key = [0u8; 12];
            key[..4].copy_from_slice(&bucket.to_le_bytes());
            key[4..].copy_from_slice(&logger.to_le_bytes());
            let w = stable_hash(&key);
            // Ties break toward the lower logger id (BTreeSet order).
            if best.map(|(bw, _)| w > bw).unwrap_or(true) {
                best = Some((w, logger));
            }
        }
        best.map(|(_, l)| l).ok_or(EngineError::EmptyRing)
    }

    pub fn bucket_of_shard(&self, shard: ShardId) -> u32 {
        (stable_hash(&shard.to_le_bytes()) % self.bucket_count as u64) as u32
    }

    /// Logger owning a shard's bucket.
    pub fn logger_for_shard(&self, shard: ShardId) -> Result<u64> {
        self.bucket_owner(self.bucket_of_shard(shard))
    }

    /// Full bucket → owner table, mostly for rebalancing audits.
    pub fn ownership(&self) -> Result<Vec<u64>> {
        (0..self.bucket_count).map(|b| self.bucket_owner(b)).collect()
    }
}

/// Where a primary key goes: its shard, the shard's WAL channel, and the
/// logger currently owning that shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub shard_id: ShardId,
    pub channel: String,
    pub logger_id: u64,
}

pub fn wal_channel(collection_id: u64, shard: ShardId) -> String {
    format!("wal/c{collection_id}-shard-{shard}")
}

pub fn route(
    ring: &HashRing,
    collection_id: u64,
    shard_count: u32,
    pk: &PkValue,
) -> Result<Route> {
    let shard_id = shard_of(pk, shard_count);
    Ok(Route {
        shard_id,
        channel: wal_channel(collection_id, shard_id),
        logger_id: ring.logger_for_shard(shard_id)?,
    })
}
