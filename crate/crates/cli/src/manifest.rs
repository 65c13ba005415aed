use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub experiment: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    pub master_seed: u64,
    pub seeding: String,
    pub status: Status,
    pub files: Vec<FileRecord>,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Every write of a run goes through here, so the inventory is complete
/// and nothing lands outside the run directory.
pub struct OutputTree {
    root: PathBuf,
    files: Vec<FileRecord>,
}

impl OutputTree {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        // a previous run of the same config is replaced wholesale, but only
        // if it really is one of ours
        if root.exists() {
            if !root.join(MANIFEST).exists() {
                return Err(CliError::Io(format!(
                    "{} exists and is not a run directory; refusing to overwrite",
                    root.display()
                )));
            }
            fs::remove_dir_all(root).map_err(|e| CliError::io(root, e))?;
        }
        fs::create_dir_all(root.join("fields")).map_err(|e| CliError::io(root, e))?;
        Ok(OutputTree {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(rel);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.record(rel)
    }

    /// Adds a file some other writer already produced under the root.
    pub fn record(&mut self, rel: &str) -> Result<(), CliError> {
        let path = self.path(rel);
        let bytes = fs::metadata(&path).map_err(|e| CliError::io(&path, e))?.len();
        self.files.push(FileRecord {
            path: rel.to_string(),
            sha256: sha256_file(&path)?,
            bytes,
        });
        Ok(())
    }

    pub fn files(&self) -> &[FileRecord] {
        &self.files
    }

    pub fn finish(self, mut manifest: RunManifest) -> Result<RunManifest, CliError> {
        manifest.files = self.files;
        manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
        write_manifest(&self.root, &manifest)?;
        Ok(manifest)
    }
}

/// Written to a temporary name and renamed, so a manifest is either
/// complete or absent.
pub fn write_manifest(root: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let tmp = root.join(".manifest.json.tmp");
    let json = serde_json::to_vec_pretty(manifest).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(&tmp, json).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, root.join(MANIFEST)).map_err(|e| CliError::io(root, e))
}

pub fn read_manifest(root: &Path) -> Result<RunManifest, CliError> {
    let path = root.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| CliError::Integrity(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Integrity(format!("{}: {e}", path.display())))
}

/// Re-hashes every inventoried file. The error names each offending path.
pub fn verify(root: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let mut bad = Vec::new();
    for f in &manifest.files {
        let path = root.join(&f.path);
        match sha256_file(&path) {
            Ok(h) if h == f.sha256 => {}
            Ok(_) => bad.push(format!("{}: checksum mismatch", path.display())),
            Err(_) => bad.push(format!("{}: missing", path.display())),
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Integrity(bad.join("; ")))
    }
}
