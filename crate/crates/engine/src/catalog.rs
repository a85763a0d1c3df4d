//! Collection catalog, kept in coordination metadata so every component
//! reads the same definitions.

use serde::{Deserialize, Serialize};

use logvec_core::error::{EngineError, Result};
use logvec_core::ring::wal_channel;
use logvec_core::schema::Schema;
use logvec_core::segment::CollectionId;

use crate::meta::MetaStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionInfo {
    pub collection_id: CollectionId,
    pub name: String,
    pub schema: Schema,
    pub shard_count: u32,
}

impl CollectionInfo {
    pub fn key_by_name(name: &str) -> String {
        format!("catalog/name/{name}")
    }

    pub fn key_by_id(collection_id: CollectionId) -> String {
        format!("catalog/id/{collection_id}")
    }

    /// WAL channel names of every shard, in shard order.
    pub fn wal_channels(&self) -> Vec<String> {
        (0..self.shard_count).map(|s| wal_channel(self.collection_id, s)).collect()
    }
}

pub fn save(meta: &mut MetaStore, info: &CollectionInfo) -> Result<()> {
    meta.set_json(&CollectionInfo::key_by_name(&info.name), info)?;
    meta.set_json(&CollectionInfo::key_by_id(info.collection_id), info)?;
    Ok(())
}

pub fn remove(meta: &mut MetaStore, info: &CollectionInfo) -> Result<()> {
    meta.delete(&CollectionInfo::key_by_name(&info.name))?;
    meta.delete(&CollectionInfo::key_by_id(info.collection_id))?;
    Ok(())
}

pub fn by_name(meta: &MetaStore, name: &str) -> Result<CollectionInfo> {
    meta.get_json(&CollectionInfo::key_by_name(name))?
        .ok_or_else(|| EngineError::UnknownCollection(name.to_string()))
}

pub fn by_id(meta: &MetaStore, collection_id: CollectionId) -> Result<CollectionInfo> {
    meta.get_json(&CollectionInfo::key_by_id(collection_id))?
        .ok_or_else(|| EngineError::UnknownCollection(format!("id {collection_id}")))
}

pub fn exists(meta: &MetaStore, name: &str) -> bool {
    meta.get(&CollectionInfo::key_by_name(name)).is_some()
}

/// Every collection currently defined.
pub fn all(meta: &MetaStore) -> Result<Vec<CollectionInfo>> {
    let mut out = Vec::new();
    for key in meta.keys_with_prefix("catalog/name/") {
        if let Some(info) = meta.get_json(&key)? {
            out.push(info);
        }
    }
    Ok(out)
}
