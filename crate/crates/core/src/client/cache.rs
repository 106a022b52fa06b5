//! On-disk response cache.
//!
//! Layout: `<dir>/<first two hex chars>/<sha256>.json` holding the raw
//! response bytes, plus an append-only `manifest.jsonl`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    manifest: Mutex<()>,
}

#[derive(Serialize)]
struct ManifestLine<'a> {
    key: &'a str,
    url: &'a str,
    model: &'a str,
    bytes: usize,
}

/// Hash of `(url, model, body)`; the url carries the base url and endpoint.
pub fn request_key(url: &str, model: &str, body: &[u8]) -> String {
    let mut hasher = Sha256::new();
    for part in [url.as_bytes(), model.as_bytes(), body] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            manifest: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<Vec<u8>> {
        fs::read(self.path(key)).ok()
    }

    /// Writes the entry atomically (temp file + rename) and records it in
    /// the manifest.
    pub fn put(&self, key: &str, url: &str, model: &str, body: &[u8]) -> std::io::Result<()> {
        let path = self.path(key);
        let parent = path.parent().expect("cache entry has a parent");
        fs::create_dir_all(parent)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
        tmp.write_all(body)?;
        tmp.as_file().sync_all()?;
        let fresh = !path.exists();
        tmp.persist(&path).map_err(|e| e.error)?;
        if fresh {
            let _guard = self.manifest.lock().unwrap_or_else(|p| p.into_inner());
            let mut manifest = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.dir.join("manifest.jsonl"))?;
            let line = serde_json::to_string(&ManifestLine {
                key,
                url,
                model,
                bytes: body.len(),
            })?;
            writeln!(manifest, "{line}")?;
        }
        Ok(())
    }

    /// Number of entries recorded in the manifest.
    pub fn manifest_entries(&self) -> usize {
        fs::read_to_string(self.dir.join("manifest.jsonl"))
            .map(|t| t.lines().filter(|l| !l.trim().is_empty()).count())
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = request_key("http://x/completions", "m", b"{}");
        assert!(cache.get(&key).is_none());
        cache.put(&key, "http://x/completions", "m", b"payload").unwrap();
        cache.put(&key, "http://x/completions", "m", b"payload").unwrap();
        assert_eq!(cache.get(&key).unwrap(), b"payload");
        assert_eq!(cache.manifest_entries(), 1);
        assert!(dir.path().join(&key[..2]).join(format!("{key}.json")).exists());
    }

    #[test]
    fn key_depends_on_every_part() {
        let base = request_key("u", "m", b"b");
        assert_ne!(base, request_key("u2", "m", b"b"));
        assert_ne!(base, request_key("u", "m2", b"b"));
        assert_ne!(base, request_key("u", "m", b"b2"));
        assert_eq!(base.len(), 64);
    }
}
