//! Per-run manifest: enough to re-run a command and check its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pcam_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: String,
    pub seed: u64,
    pub threads: usize,
    /// Effective configuration, defaults included.
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<FileHash>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileHash>,
    pub duration_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// One digest over several files, in order; used for dataset directories.
pub fn sha256_files(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(Sha256::digest(fs::read(p)?));
    }
    Ok(hex::encode(h.finalize()))
}

pub fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

impl RunManifest {
    /// Writes `manifest.json` through a temporary file and a rename.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(FILE_NAME);
        let tmp = out_dir.join(format!(".{FILE_NAME}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Output files under `out_dir` whose hash differs from the record.
    pub fn mismatches(&self, out_dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for f in &self.outputs {
            match sha256_file(&out_dir.join(&f.path)) {
                Ok(h) if h == f.sha256 => {}
                Ok(_) => bad.push(f.path.clone()),
                Err(Error::Io(_)) => bad.push(format!("{} (missing)", f.path)),
                Err(e) => return Err(e),
            }
        }
        Ok(bad)
    }
}
