//! Output directory: atomic writes, a record of written files, and the
//! content-addressed sub-run cache used by `--resume`.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crossdiff_core::io::write_atomic;
use crossdiff_core::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
pub struct Output {
    root: PathBuf,
    resume: bool,
    written: Mutex<Vec<String>>,
}

impl Output {
    pub fn new(root: impl Into<PathBuf>, resume: bool) -> Self {
        Self {
            root: root.into(),
            resume,
            written: Mutex::new(Vec::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `rel` under the root and records it.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(rel), bytes)?;
        let mut w = self.written.lock().unwrap();
        if !w.iter().any(|f| f == rel) {
            w.push(rel.to_string());
        }
        Ok(())
    }

    /// Files written since creation (or the last `take_written`), in order.
    pub fn take_written(&self) -> Vec<String> {
        std::mem::take(&mut self.written.lock().unwrap())
    }

    /// Returns the cached value for `key` when resuming, otherwise computes
    /// it and stores it under `cache/<sha256 of key>.json`.
    pub fn cached<K, T, F>(&self, key: &K, compute: F) -> Result<T>
    where
        K: Serialize,
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        let digest = sha256_hex(&serde_json::to_vec(key)?);
        let path = self.root.join("cache").join(format!("{digest}.json"));
        if self.resume {
            if let Ok(bytes) = std::fs::read(&path) {
                if let Ok(v) = serde_json::from_slice(&bytes) {
                    return Ok(v);
                }
            }
        }
        let v = compute()?;
        write_atomic(&path, &serde_json::to_vec(&v)?)?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resume_reuses_cached_values() {
        let dir = tempfile::tempdir().unwrap();
        let out = Output::new(dir.path(), false);
        let v: u32 = out.cached(&("k", 1), || Ok(7)).unwrap();
        assert_eq!(v, 7);
        let fresh: u32 = out.cached(&("k", 1), || Ok(8)).unwrap();
        assert_eq!(fresh, 8);
        let resumed = Output::new(dir.path(), true);
        let again: u32 = resumed.cached(&("k", 1), || panic!("should not recompute")).unwrap();
        assert_eq!(again, 8);
    }

    #[test]
    fn written_files_are_recorded_once() {
        let dir = tempfile::tempdir().unwrap();
        let out = Output::new(dir.path(), false);
        out.write("a.csv", b"x").unwrap();
        out.write("a.csv", b"y").unwrap();
        out.write("sub/b.csv", b"z").unwrap();
        assert_eq!(out.take_written(), vec!["a.csv", "sub/b.csv"]);
        assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), b"y");
    }
}
