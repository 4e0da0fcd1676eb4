//! Per-directory run manifests and the output-directory lock.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parent {
    pub stage: String,
    pub dir: PathBuf,
    /// Digest over the parent's output hashes.
    pub outputs_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub parents: Vec<Parent>,
    pub outputs: Vec<FileHash>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub wall_time_s: f64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Manifest {
    pub fn outputs_digest(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.outputs {
            h.update(f.path.as_bytes());
            h.update([0]);
            h.update(f.sha256.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    pub fn as_parent(&self, dir: &Path) -> Parent {
        Parent {
            stage: self.stage.clone(),
            dir: dir.to_path_buf(),
            outputs_sha256: self.outputs_digest(),
        }
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes of the named files in `dir`, in the given order.
pub fn hash_files(dir: &Path, names: &[&str]) -> Result<Vec<FileHash>> {
    names
        .iter()
        .map(|n| {
            Ok(FileHash {
                path: n.to_string(),
                sha256: hash_file(&dir.join(n))?,
            })
        })
        .collect()
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, serde_json::to_string_pretty(m)?).map_err(|e| Error::io(&p, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Artifact(format!("{}: {e}", p.display())))
}

/// Re-hashes a manifest's outputs; an artifact error names the first file
/// that changed.
pub fn verify_manifest(dir: &Path) -> Result<Manifest> {
    let m = read_manifest(dir)?;
    for f in &m.outputs {
        if hash_file(&dir.join(&f.path))? != f.sha256 {
            return Err(Error::Artifact(format!(
                "{} changed since its manifest was written",
                dir.join(&f.path).display()
            )));
        }
    }
    Ok(m)
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

pub const LOCK_FILE: &str = ".hno.lock";

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Artifact(format!(
                    "{} is locked by another run ({}); remove the file if that run is gone",
                    dir.display(),
                    path.display()
                )),
                _ => Error::io(&path, e),
            })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
