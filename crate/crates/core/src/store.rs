//! Local-filesystem object store. Keys are slash-separated opaque names in
//! the style `collection/{id}/segment/{id}/{kind}`; puts are atomic via
//! write-temp-then-rename, so a reader never sees a partial object.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{EngineError, Result};

pub const OBJECTS_DIR: &str = "objects";

pub struct ObjectStore {
    root: PathBuf,
    tmp_counter: AtomicU64,
}

impl ObjectStore {
    pub fn open(root: impl AsRef<Path>) -> Result<ObjectStore> {
        let root = root.as_ref().join(OBJECTS_DIR);
        fs::create_dir_all(&root)?;
        Ok(ObjectStore { root, tmp_counter: AtomicU64::new(0) })
    }

    fn key_path(&self, key: &str) -> Result<PathBuf> {
        if key.is_empty()
            || key.starts_with('/')
            || key.ends_with('/')
            || key.split('/').any(|part| part.is_empty() || part == "." || part == "..")
        {
            return Err(EngineError::InvalidParam(format!("bad object key {key:?}")));
        }
        Ok(self.root.join(key))
    }

    pub fn put(&self, key: &str, bytes: &[u8]) -> Result<()> {
        let path = self.key_path(key)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let nonce = self.tmp_counter.fetch_add(1, Ordering::SeqCst);
        let tmp = path.with_extension(format!("tmp-{nonce}"));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<Vec<u8>> {
        let path = self.key_path(key)?;
        fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                EngineError::ObjectMissing(key.to_string())
            } else {
                EngineError::Io(e)
            }
        })
    }

    pub fn exists(&self, key: &str) -> Result<bool> {
        Ok(self.key_path(key)?.exists())
    }

    pub fn delete(&self, key: &str) -> Result<()> {
        let path = self.key_path(key)?;
        match fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(EngineError::ObjectMissing(key.to_string()))
            }
            Err(e) => Err(EngineError::Io(e)),
        }
    }

    /// All keys starting with `prefix`, sorted. Empty prefix lists everything.
    pub fn list(&self, prefix: &str) -> Result<Vec<String>> {
        let mut keys = Vec::new();
        if self.root.exists() {
            walk(&self.root, &self.root, &mut keys)?;
        }
        keys.retain(|k| k.starts_with(prefix));
        keys.sort();
        Ok(keys)
    }
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for item in fs::read_dir(dir)? {
        let path = item?.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stayed under root");
            let key = rel.to_string_lossy().replace(std::path::MAIN_SEPARATOR, "/");
            // Skip orphaned temp files from interrupted puts.
            if key.rsplit('.').next().map(|ext| ext.starts_with("tmp-")) != Some(true) {
                out.push(key);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh() -> (tempfile::TempDir, ObjectStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        (dir, store)
    }

    #[test]
    fn put_get_roundtrip() {
        let (_dir, store) = fresh();
        store.put("collection/1/segment/2/binlog/vector", b"abc").unwrap();
        assert_eq!(store.get("collection/1/segment/2/binlog/vector").unwrap(), b"abc");
    }

    #[test]
    fn get_missing_is_object_missing() {
        let (_dir, store) = fresh();
        assert!(matches!(store.get("nope"), Err(EngineError::ObjectMissing(_))));
    }

    #[test]
    fn overwrite_is_last_writer_wins() {
        let (_dir, store) = fresh();
        store.put("k", b"one").unwrap();
        store.put("k", b"two").unwrap();
        assert_eq!(store.get("k").unwrap(), b"two");
    }

    #[test]
    fn list_filters_by_prefix_and_sorts() {
        let (_dir, store) = fresh();
        store.put("collection/1/segment/2/x", b"").unwrap();
        store.put("collection/1/segment/10/x", b"").unwrap();
        store.put("collection/2/segment/1/x", b"").unwrap();
        let got = store.list("collection/1/").unwrap();
        assert_eq!(got, vec!["collection/1/segment/10/x", "collection/1/segment/2/x"]);
        assert_eq!(store.list("").unwrap().len(), 3);
    }

    #[test]
    fn delete_removes_and_errors_when_absent() {
        let (_dir, store) = fresh();
        store.put("k", b"x").unwrap();
        store.delete("k").unwrap();
        assert!(matches!(store.delete("k"), Err(EngineError::ObjectMissing(_))));
        assert!(!store.exists("k").unwrap());
    }

    #[test]
    fn unsafe_keys_are_rejected() {
        let (_dir, store) = fresh();
        for bad in ["", "/abs", "a//b", "../up", "a/../b", "trailing/"] {
            assert!(store.put(bad, b"x").is_err(), "{bad:?} accepted");
        }
    }
}
