//! Run manifest: per-stage input hashes and artifact digests.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use atlasprompt::phantom::Split;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Result, Stage};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    pub ga_week: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_hash: String,
    pub seed: u64,
    /// Path relative to the work directory, or absolute when outside it,
    /// to the file's sha256.
    pub artifacts: BTreeMap<String, String>,
    /// Input hash per independently cached item, e.g. per registered case.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub items: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub cases: Vec<CaseEntry>,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn load_or_default(work: &Path) -> Result<Self> {
        let path = work.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Stale(format!("unreadable manifest {}: {e}", path.display())))
    }

    pub fn save(&self, work: &Path) -> Result<()> {
        let path = work.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    pub fn cases(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }
}

impl StageRecord {
    /// First artifact that is missing or whose content changed.
    pub fn verify(&self, work: &Path) -> Result<(), String> {
        for (key, digest) in &self.artifacts {
            let path = resolve_key(work, key);
            match sha256_file(&path) {
                Ok(d) if &d == digest => {}
                Ok(_) => return Err(format!("{key} was modified")),
                Err(_) => return Err(format!("{key} is missing")),
            }
        }
        Ok(())
    }

    /// Digests of artifacts under `prefix`, keyed as in the manifest.
    pub fn artifacts_under(&self, prefix: &str) -> BTreeMap<String, String> {
        self.artifacts
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// sha256 of a value's compact JSON encoding. Maps must be ordered for the
/// digest to be stable, hence the `BTreeMap`s throughout.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("hash input serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn artifact_key(work: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(work).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn resolve_key(work: &Path, key: &str) -> PathBuf {
    let p = Path::new(key);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        work.join(p)
    }
}

/// Digest of every file below `dir`, recursively.
pub fn hash_tree(work: &Path, dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| CliError::io(&d, e))?;
        for e in entries {
            let e = e.map_err(|e| CliError::io(&d, e))?;
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = sha256_file(&p).map_err(|e| CliError::io(&p, e))?;
                out.insert(artifact_key(work, &p), digest);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_hash_detects_edits() {
        let dir = tempfile::tempdir().unwrap();
        let work = dir.path();
        std::fs::create_dir_all(work.join("s/a")).unwrap();
        std::fs::write(work.join("s/a/x.txt"), "one").unwrap();
        std::fs::write(work.join("s/y.txt"), "two").unwrap();
        let arts = hash_tree(work, &work.join("s")).unwrap();
        assert_eq!(arts.keys().collect::<Vec<_>>(), ["s/a/x.txt", "s/y.txt"]);
        // sha256("two")
        assert_eq!(arts["s/y.txt"], "3fc4ccfe745870e2c0d99f71f30ff0656c8dedd41cc1d7d3d376b0dbe685e2f3");
        let rec = StageRecord {
            artifacts: arts,
            ..Default::default()
        };
        assert!(rec.verify(work).is_ok());
        std::fs::write(work.join("s/y.txt"), "three").unwrap();
        assert!(rec.verify(work).unwrap_err().contains("modified"));
        std::fs::remove_file(work.join("s/a/x.txt")).unwrap();
        assert!(rec.verify(work).unwrap_err().contains("missing"));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest {
            seed: 3,
            ..Default::default()
        };
        m.stages.insert(Stage::Train, StageRecord::default());
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load_or_default(dir.path()).unwrap(), m);
    }
}
