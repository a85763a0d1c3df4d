//! Embedded metadata store: a key→value map with a persisted write-ahead
//! record file. All writes go through one owner, so it is linearizable
//! in-process; on restart the record file is replayed.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use logvec_core::error::{EngineError, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub const META_FILE: &str = "meta.wal";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum MetaRecord {
    Set { key: String, value: String },
    Del { key: String },
}

#[derive(Debug)]
pub struct MetaStore {
    path: PathBuf,
    map: BTreeMap<String, String>,
    writer: BufWriter<File>,
}

impl MetaStore {
    pub fn open(dir: &Path) -> Result<MetaStore> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(META_FILE);
        let mut map = BTreeMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            for (n, line) in text.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let record: MetaRecord =
                    serde_json::from_str(line).map_err(|e| EngineError::Corrupt {
                        path: path.display().to_string(),
                        reason: format!("record {n}: {e}"),
                    })?;
                match record {
                    MetaRecord::Set { key, value } => {
                        map.insert(key, value);
                    }
                    MetaRecord::Del { key } => {
                        map.remove(&key);
                    }
                }
            }
        }
        let writer = BufWriter::new(OpenOptions::new().create(true).append(true).open(&path)?);
        Ok(MetaStore { path, map, writer })
    }

    fn append(&mut self, record: &MetaRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("meta record serialization cannot fail");
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.append(&MetaRecord::Set { key: key.to_string(), value: value.to_string() })?;
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn set_json<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string(value).expect("metadata serialization cannot fail");
        self.set(key, &text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn get_json<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(text) => serde_json::from_str(text).map(Some).map_err(|e| {
                EngineError::Corrupt {
                    path: format!("meta:{key}"),
                    reason: e.to_string(),
                }
            }),
        }
    }

    pub fn delete(&mut self, key: &str) -> Result<bool> {
        if !self.map.contains_key(key) {
            return Ok(false);
        }
        self.append(&MetaRecord::Del { key: key.to_string() })?;
        self.map.remove(key);
        Ok(true)
    }

    /// Keys under a prefix, in sorted order.
    pub fn keys_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.map
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Monotonic counter used for ids; first value is `start`.
    pub fn next_id(&mut self, counter: &str, start: u64) -> Result<u64> {
        let key = format!("next/{counter}");
        let current = self
            .get(&key)
            .map(|v| v.parse::<u64>())
            .transpose()
            .map_err(|e| EngineError::Corrupt {
                path: format!("meta:{key}"),
                reason: e.to_string(),
            })?
            .unwrap_or(start);
        self.set(&key, &(current + 1).to_string())?;
        Ok(current)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut meta = MetaStore::open(dir.path()).unwrap();
            meta.set("a", "1").unwrap();
            meta.set("b/x", "2").unwrap();
            meta.set("a", "3").unwrap();
            meta.delete("b/x").unwrap();
            assert_eq!(meta.next_id("segment", 1).unwrap(), 1);
            assert_eq!(meta.next_id("segment", 1).unwrap(), 2);
        }
        let meta = MetaStore::open(dir.path()).unwrap();
        assert_eq!(meta.get("a"), Some("3"));
        assert_eq!(meta.get("b/x"), None);
        assert_eq!(meta.get("next/segment"), Some("3"));
    }

    #[test]
    fn json_values_and_prefix_scans() {
        let dir = tempfile::tempdir().unwrap();
        let mut meta = MetaStore::open(dir.path()).unwrap();
        meta.set_json("seg/2", &vec![1u64, 2]).unwrap();
        meta.set_json("seg/10", &vec![3u64]).unwrap();
        meta.set("other", "x").unwrap();
        assert_eq!(meta.keys_with_prefix("seg/"), vec!["seg/10", "seg/2"]);
        let v: Option<Vec<u64>> = meta.get_json("seg/2").unwrap();
        assert_eq!(v, Some(vec![1, 2]));
        let missing: Option<Vec<u64>> = meta.get_json("nope").unwrap();
        assert_eq!(missing, None);
    }

    #[test]
    fn corrupt_records_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(META_FILE), b"{\"op\":\"set\"\n").unwrap();
        assert!(matches!(MetaStore::open(dir.path()), Err(EngineError::Corrupt { .. })));
    }

    #[test]
    fn delete_of_absent_key_is_a_noop() {
        let dir = tempfile::tempdir().unwrap();
        let mut meta = MetaStore::open(dir.path()).unwrap();
        assert!(!meta.delete("ghost").unwrap());
    }
}
