//! `manifest.json`: one record per completed stage with the digests of its
//! inputs and outputs. A stage whose recorded key and output digests still
//! match is skipped on rerun.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sha256_bytes, sha256_file, write_bytes};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digest of the stage's configuration and input digests.
    pub key: String,
    /// Input path (relative to the output directory) → SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
    pub forward_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        write_bytes(&dir.join(MANIFEST_FILE), json.as_bytes())
    }

    /// Whether `stage` was completed with `key` and its outputs are intact.
    pub fn is_current(&self, dir: &Path, stage: &str, key: &str) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        rec.key == key
            && rec
                .outputs
                .iter()
                .all(|(p, d)| sha256_file(&dir.join(p)).is_ok_and(|got| &got == d))
    }

    /// Outputs of a completed stage, verified against their digests.
    pub fn verified_outputs(&self, dir: &Path, stage: &str) -> Option<&BTreeMap<String, String>> {
        let rec = self.stages.get(stage)?;
        rec.outputs
            .iter()
            .all(|(p, d)| sha256_file(&dir.join(p)).is_ok_and(|got| &got == d))
            .then_some(&rec.outputs)
    }

    /// Files in `dir` (other than the manifest) not owned by exactly one
    /// stage, and owned paths that are missing.
    pub fn completeness_problems(&self, dir: &Path) -> Result<Vec<String>> {
        let mut owners: BTreeMap<&str, usize> = BTreeMap::new();
        for rec in self.stages.values() {
            for p in rec.outputs.keys() {
                *owners.entry(p.as_str()).or_default() += 1;
            }
        }
        let mut problems = Vec::new();
        let files = list_files(dir)?;
        for f in &files {
            match owners.get(f.as_str()) {
                Some(1) => {}
                Some(n) => problems.push(format!("{f}: listed by {n} stages")),
                None => problems.push(format!("{f}: not listed in the manifest")),
            }
        }
        for p in owners.keys() {
            if !files.iter().any(|f| f == p) {
                problems.push(format!("{p}: listed but missing"));
            }
        }
        Ok(problems)
    }
}

/// Relative paths (with `/` separators) of all regular files under `dir`,
/// excluding the manifest, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, cur: &Path, out: &mut Vec<String>) -> Result<()> {
        let rd = std::fs::read_dir(cur).map_err(|e| Error::io(cur, e))?;
        for entry in rd {
            let entry = entry.map_err(|e| Error::io(cur, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(relative(root, &path));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if dir.exists() {
        walk(dir, dir, &mut out)?;
    }
    out.retain(|p| p != MANIFEST_FILE);
    out.sort();
    Ok(out)
}

pub fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Digests of `paths` keyed by their path relative to `root`.
pub fn digest_all(root: &Path, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((relative(root, p), sha256_file(p)?)))
        .collect()
}

/// Stage key: digest of a serialized configuration fragment and the input
/// digests.
pub fn stage_key<T: Serialize>(fragment: &T, inputs: &BTreeMap<String, String>) -> String {
    let json = serde_json::to_string(&(fragment, inputs)).expect("serializable stage key");
    sha256_bytes(json.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn currency_and_completeness() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let a = d.join("x/a.bin");
        write_bytes(&a, b"abc").unwrap();
        let mut m = RunManifest::default();
        let outputs = digest_all(d, &[a.clone()]).unwrap();
        assert_eq!(outputs.keys().next().unwrap(), "x/a.bin");
        m.stages.insert(
            "s".into(),
            StageRecord {
                key: "k".into(),
                inputs: BTreeMap::new(),
                outputs,
                seconds: 0.0,
                forward_calls: 0,
            },
        );
        m.save(d).unwrap();
        let m = RunManifest::load(d).unwrap();
        assert!(m.is_current(d, "s", "k"));
        assert!(!m.is_current(d, "s", "other"));
        assert!(m.completeness_problems(d).unwrap().is_empty());
        write_bytes(&d.join("stray.txt"), b"").unwrap();
        assert_eq!(m.completeness_problems(d).unwrap().len(), 1);
        write_bytes(&a, b"abd").unwrap();
        assert!(!m.is_current(d, "s", "k"));
        assert!(m.verified_outputs(d, "s").is_none());
    }
}
