//! Content-addressed stage cache, run manifests and atomic file writes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;

/// Write `bytes` to `path` through a temporary file in the same directory
/// and a rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Serialize records one JSON object per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("serializable record");
        out.push(b'\n');
    }
    out
}

/// Parse JSONL, skipping blank lines. Errors name the 1-based line.
pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

/// Stage outputs keyed by `(stage, input digest, config hash)`. Each entry
/// stores its payload and the payload's SHA-256; a mismatch on read is
/// reported as a miss so the stage recomputes. Eviction is manual.
#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    Hit,
    Miss,
    /// An entry existed but failed its digest check.
    Corrupt,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key(stage: &str, input_digest: &str, config_hash: &str) -> String {
        sha256_hex(format!("{stage}\n{input_digest}\n{config_hash}").as_bytes())
    }

    fn paths(&self, stage: &str, key: &str) -> (PathBuf, PathBuf) {
        let dir = self.root.join(stage);
        (dir.join(format!("{key}.bin")), dir.join(format!("{key}.sha256")))
    }

    pub fn get(&self, stage: &str, input_digest: &str, config_hash: &str) -> (Lookup, Option<Vec<u8>>) {
        let key = Self::key(stage, input_digest, config_hash);
        let (data, sum) = self.paths(stage, &key);
        let (Ok(bytes), Ok(expected)) = (std::fs::read(&data), std::fs::read_to_string(&sum)) else {
            return (Lookup::Miss, None);
        };
        if sha256_hex(&bytes) != expected.trim() {
            log::warn!("cache entry {stage}/{key} failed its digest check; recomputing");
            return (Lookup::Corrupt, None);
        }
        (Lookup::Hit, Some(bytes))
    }

    pub fn put(&self, stage: &str, input_digest: &str, config_hash: &str, bytes: &[u8]) -> std::io::Result<()> {
        let key = Self::key(stage, input_digest, config_hash);
        let (data, sum) = self.paths(stage, &key);
        write_atomic(&data, bytes)?;
        write_atomic(&sum, sha256_hex(bytes).as_bytes())
    }

    /// Cached value, or `compute` stored on a miss. Returns whether it hit.
    pub fn get_or_compute<E>(
        &self,
        stage: &str,
        input_digest: &str,
        config_hash: &str,
        compute: impl FnOnce() -> Result<Vec<u8>, E>,
    ) -> Result<(Vec<u8>, Lookup), E>
    where
        E: From<std::io::Error>,
    {
        match self.get(stage, input_digest, config_hash) {
            (Lookup::Hit, Some(b)) => Ok((b, Lookup::Hit)),
            (lookup, _) => {
                let b = compute()?;
                self.put(stage, input_digest, config_hash, &b)?;
                Ok((b, lookup))
            }
        }
    }
}

/// Sidecar written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub template_hashes: BTreeMap<String, String>,
    pub input_digests: BTreeMap<String, String>,
    /// SHA-256 of the artifact the manifest describes.
    pub output_digest: String,
    pub backend: String,
    /// Work units that failed without aborting the run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

impl Manifest {
    /// `<artifact>.manifest.json`.
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }

    pub fn write_for(&self, artifact: &Path) -> std::io::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("serializable manifest");
        bytes.push(b'\n');
        write_atomic(&Self::path_for(artifact), &bytes)
    }

    pub fn read_for(artifact: &Path) -> Result<Self, String> {
        let p = Self::path_for(artifact);
        let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn hit_miss_and_keying() {
        let dir = tempfile::tempdir().unwrap();
        let c = Cache::new(dir.path());
        assert_eq!(c.get("ground", "in", "cfg").0, Lookup::Miss);
        c.put("ground", "in", "cfg", b"tracks").unwrap();
        assert_eq!(c.get("ground", "in", "cfg"), (Lookup::Hit, Some(b"tracks".to_vec())));
        assert_eq!(c.get("ground", "in", "cfg2").0, Lookup::Miss);
        assert_eq!(c.get("scenes", "in", "cfg").0, Lookup::Miss);
    }

    #[test]
    fn corruption_recomputes() {
        let dir = tempfile::tempdir().unwrap();
        let c = Cache::new(dir.path());
        c.put("s", "i", "c", b"good").unwrap();
        let key = Cache::key("s", "i", "c");
        std::fs::write(dir.path().join("s").join(format!("{key}.bin")), b"bad!").unwrap();
        assert_eq!(c.get("s", "i", "c").0, Lookup::Corrupt);
        let (b, l) = c
            .get_or_compute::<std::io::Error>("s", "i", "c", || Ok(b"good".to_vec()))
            .unwrap();
        assert_eq!((b.as_slice(), l), (&b"good"[..], Lookup::Corrupt));
        assert_eq!(c.get("s", "i", "c").0, Lookup::Hit);
    }

    #[test]
    fn jsonl_round_trip() {
        let v = vec![serde_json::json!({"a": 1}), serde_json::json!({"b": [2]})];
        let bytes = to_jsonl(&v);
        assert_eq!(String::from_utf8(bytes.clone()).unwrap(), "{\"a\":1}\n{\"b\":[2]}\n");
        let back: Vec<serde_json::Value> = from_jsonl(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(back, v);
        assert!(from_jsonl::<serde_json::Value>("{}\n\nnope").unwrap_err().starts_with("line 3"));
    }

    #[test]
    fn manifest_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("tracks.jsonl");
        let m = Manifest {
            stage: "ground".into(),
            config_hash: "c".into(),
            template_hashes: BTreeMap::new(),
            input_digests: BTreeMap::new(),
            output_digest: "d".into(),
            backend: "mock".into(),
            failures: vec![],
        };
        m.write_for(&art).unwrap();
        assert!(dir.path().join("tracks.jsonl.manifest.json").is_file());
        assert_eq!(Manifest::read_for(&art).unwrap(), m);
    }
}
