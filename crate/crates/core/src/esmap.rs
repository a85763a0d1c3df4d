//! Entity → segment mapping kept by each logger: an in-memory memtable plus
//! immutable sorted runs flushed to the object store. Lookups consult the
//! memtable, then runs newest-to-oldest. Deletes write a tombstone; merges
//! simply re-insert the pk under the new segment, and the newest entry wins.

use std::collections::BTreeMap;

use crate::error::{EngineError, Result};
use crate::schema::PkValue;
use crate::store::ObjectStore;

pub const RUN_MAGIC: &[u8; 4] = b"MSR1";
/// Segment id marking a deleted entity.
pub const TOMBSTONE: u64 = u64::MAX;

#[derive(Debug, Clone)]
struct SortedRun {
    key: String,
    /// Sorted by pk.
    entries: Vec<(PkValue, u64)>,
}

impl SortedRun {
    fn lookup(&self, pk: &PkValue) -> Option<u64> {
        self.entries
            .binary_search_by(|(p, _)| p.cmp(pk))
            .ok()
            .map(|i| self.entries[i].1)
    }
}

#[derive(Debug)]
pub struct EntitySegmentMap {
    prefix: String,
    memtable: BTreeMap<PkValue, u64>,
    /// Newest first.
    runs: Vec<SortedRun>,
    next_run: u64,
}

impl EntitySegmentMap {
    pub fn new(prefix: &str) -> EntitySegmentMap {
        EntitySegmentMap {
            prefix: prefix.trim_end_matches('/').to_string(),
            memtable: BTreeMap::new(),
            runs: Vec::new(),
            next_run: 0,
        }
    }

    /// Reload flushed runs from the store; the memtable starts empty and the
    /// owner replays the WAL tail on top.
    pub fn open(store: &ObjectStore, prefix: &str) -> Result<EntitySegmentMap> {
        let mut map = EntitySegmentMap::new(prefix);
        let mut keys = store.list(&format!("{}/", map.prefix))?;
        keys.retain(|k| k.ends_with(".msr"));
        keys.sort();
        for key in keys.iter().rev() {
            map.runs.push(decode_run(&store.get(key)?, key)?);
        }
        if let Some(newest) = keys.last() {
            // run-{seq:08}.msr
            let stem = newest
                .rsplit('/')
                .next()
                .and_then(|n| n.strip_prefix("run-"))
                .and_then(|n| n.strip_suffix(".msr"))
                .ok_or_else(|| EngineError::Corrupt {
                    path: newest.clone(),
                    reason: "unrecognized run file name".into(),
                })?;
            map.next_run = stem.parse::<u64>().map_err(|_| EngineError::Corrupt {
                path: newest.clone(),
                reason: "unrecognized run sequence number".into(),
            })? + 1;
        }
        Ok(map)
    }

    pub fn insert(&mut self, pk: PkValue, segment_id: u64) {
        self.memtable.insert(pk, segment_id);
    }

    pub fn remove(&mut self, pk: PkValue) {
        self.memtable.insert(pk, TOMBSTONE);
    }

    /// Live segment of a pk, or None if unknown or tombstoned.
    pub fn lookup(&self, pk: &PkValue) -> Option<u64> {
        let found = self.memtable.get(pk).copied().or_else(|| {
            self.runs.iter().find_map(|r| r.lookup(pk))
        })?;
        (found != TOMBSTONE).then_some(found)
    }

    pub fn contains(&self, pk: &PkValue) -> bool {
        self.lookup(pk).is_some()
    }

    pub fn memtable_len(&self) -> usize {
        self.memtable.len()
    }

    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    /// Flush the memtable as a new immutable sorted run. No-op when the
    /// memtable is empty; on a store failure the memtable is retained.
    pub fn flush(&mut self, store: &ObjectStore) -> Result<Option<String>> {
        if self.memtable.is_empty() {
            return Ok(None);
        }
        let entries: Vec<(PkValue, u64)> =
            self.memtable.iter().map(|(p, s)| (p.clone(), *s)).collect();
        let key = format!("{}/run-{:08}.msr", self.prefix, self.next_run);
        store.put(&key, &encode_run(&entries))?;
        self.next_run += 1;
        self.memtable.clear();
        self.runs.insert(0, SortedRun { key: key.clone(), entries });
        Ok(Some(key))
    }

    /// Collapse runs and memtable into the current live view (newest wins,
    /// tombstones drop out). Used by rebuild audits and merges.
    pub fn collapsed(&self) -> BTreeMap<PkValue, u64> {
        let mut out = BTreeMap::new();
        for run in self.runs.iter().rev() {
            for (pk, seg) in &run.entries {
                out.insert(pk.clone(), *seg);
            }
        }
        for (pk, seg) in &self.memtable {
            out.insert(pk.clone(), *seg);
        }
        out.retain(|_, seg| *seg != TOMBSTONE);
        out
    }

    pub fn run_keys(&self) -> impl Iterator<Item = &str> {
        self.runs.iter().map(|r| r.key.as_str())
    }
}

fn encode_pk(out: &mut Vec<u8>, pk: &PkValue) {
    match pk {
        PkValue::Int(v) => {
            out.push(0);
            out.extend_from_slice(&v.to_le_bytes());
        }
        PkValue::Str(s) => {
            out.push(1);
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
    }
}

pub fn encode_run(entries: &[(PkValue, u64)]) -> Vec<u8> {
    debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
    let mut out = Vec::with_capacity(12 + entries.len() * 17);
    out.extend_from_slice(RUN_MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (pk, seg) in entries {
        encode_pk(&mut out, pk);
        out.extend_from_slice(&seg.to_le_bytes());
    }
    out
}

fn decode_run(bytes: &[u8], name: &str) -> Result<SortedRun> {
    let corrupt = |reason: &str| EngineError::Corrupt {
        path: name.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != RUN_MAGIC {
        return Err(corrupt("missing MSR1 header"));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let mut at = 12;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = *bytes.get(at).ok_or_else(|| corrupt("truncated entry"))?;
        at += 1;
        let pk = match tag {
            0 => {
                let end = at + 8;
                if end > bytes.len() {
                    return Err(corrupt("truncated int pk"));
                }
                let v = i64::from_le_bytes(bytes[at..end].try_into().unwrap());
                at = end;
                PkValue::Int(v)
            }
            1 => {
                if at + 4 > bytes.len() {
                    return Err(corrupt("truncated string length"));
                }
                let len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
                at += 4;
                if at + len > bytes.len() {
                    return Err(corrupt("truncated string pk"));
                }
                let s = std::str::from_utf8(&bytes[at..at + len])
                    .map_err(|_| corrupt("pk is not utf-8"))?;
                at += len;
                PkValue::Str(s.to_string())
            }
            other => return Err(corrupt(&format!("unknown pk tag {other}"))),
        };
        if at + 8 > bytes.len() {
            return Err(corrupt("truncated segment id"));
        }
        let seg = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        at += 8;
        entries.push((pk, seg));
    }
    if at != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    if !entries.windows(2).all(|w| w[0].0 < w[1].0) {
        return Err(corrupt("entries are not strictly sorted"));
    }
    Ok(SortedRun { key: name.to_string(), entries })
}
