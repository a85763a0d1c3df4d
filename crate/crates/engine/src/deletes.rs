//! Persisted delete logs for sealed segments: one JSON object per segment
//! listing `(pk, delete timestamp)` pairs. Merges and index rebuilds drop the
//! listed pks; point-in-time restores apply only the entries at or before the
//! target timestamp.

use logvec_core::error::{EngineError, Result};
use logvec_core::hlc::HlcTimestamp;
use logvec_core::schema::PkValue;
use logvec_core::segment::{CollectionId, SegmentId};
use logvec_core::store::ObjectStore;

pub fn delete_log_key(collection_id: CollectionId, segment_id: SegmentId) -> String {
    format!("collection/{collection_id}/segment/{segment_id}/deletes.json")
}

/// Reads a segment's delete log; a missing object is an empty log.
pub fn read_delete_log(
    store: &ObjectStore,
    collection_id: CollectionId,
    segment_id: SegmentId,
) -> Result<Vec<(PkValue, HlcTimestamp)>> {
    let key = delete_log_key(collection_id, segment_id);
    match store.get(&key) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map_err(|e| EngineError::Corrupt { path: key, reason: e.to_string() }),
        Err(EngineError::ObjectMissing(_)) => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

/// Merges `entries` into the segment's delete log, skipping pks already
/// recorded so WAL replay can re-apply deletes without duplicating them.
/// Returns the log's object key once anything is persisted.
pub fn record_deletes(
    store: &ObjectStore,
    collection_id: CollectionId,
    segment_id: SegmentId,
    entries: &[(PkValue, HlcTimestamp)],
) -> Result<Option<String>> {
    let mut log = read_delete_log(store, collection_id, segment_id)?;
    let before = log.len();
    for (pk, ts) in entries {
        if !log.iter().any(|(seen, _)| seen == pk) {
            log.push((pk.clone(), *ts));
        }
    }
    if log.is_empty() {
        return Ok(None);
    }
    let key = delete_log_key(collection_id, segment_id);
    if log.len() != before {
        let bytes = serde_json::to_vec(&log).expect("delete log serialization cannot fail");
        store.put(&key, &bytes)?;
    }
    Ok(Some(key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use logvec_core::hlc::HlcTimestamp;

    #[test]
    fn missing_log_reads_empty_and_appends_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        assert!(read_delete_log(&store, 1, 5).unwrap().is_empty());

        let ts = HlcTimestamp::new(10, 0);
        let key = record_deletes(&store, 1, 5, &[(PkValue::Int(7), ts)]).unwrap().unwrap();
        assert_eq!(key, "collection/1/segment/5/deletes.json");

        // Replayed delete: same pk again must not duplicate.
        record_deletes(&store, 1, 5, &[(PkValue::Int(7), ts)]).unwrap();
        let log = read_delete_log(&store, 1, 5).unwrap();
        assert_eq!(log, vec![(PkValue::Int(7), ts)]);

        record_deletes(&store, 1, 5, &[(PkValue::Str("a".into()), HlcTimestamp::new(11, 0))])
            .unwrap();
        assert_eq!(read_delete_log(&store, 1, 5).unwrap().len(), 2);
    }

    #[test]
    fn recording_nothing_creates_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        assert_eq!(record_deletes(&store, 1, 5, &[]).unwrap(), None);
        assert!(matches!(
            store.get("collection/1/segment/5/deletes.json"),
            Err(EngineError::ObjectMissing(_))
        ));
    }
}
