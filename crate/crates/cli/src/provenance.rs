//! `run.json`: what was run, with which config and seed, on which inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::{CliError, Result};

pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    /// What the input is used for, e.g. `data` or `run`.
    pub role: String,
    pub path: String,
    pub files: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
}

impl RunRecord {
    pub fn new(command: &str, argv: Vec<String>, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunRecord {
            tool: "wxadapt".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv,
            seed,
            config,
            inputs: Vec::new(),
        }
    }

    /// Records a checksum of `path`; directories hash every file in path order
    /// except an existing run record.
    pub fn input(mut self, role: &str, path: &Path) -> Result<Self> {
        self.inputs.push(digest(role, path, |_| true)?);
        Ok(self)
    }

    /// Like [`RunRecord::input`], restricted to the named files of a directory.
    pub fn input_files(mut self, role: &str, dir: &Path, names: &[&str]) -> Result<Self> {
        self.inputs.push(digest(role, dir, |rel| names.iter().any(|n| Path::new(n) == rel))?);
        Ok(self)
    }

    pub fn input_path(&self, role: &str) -> Option<PathBuf> {
        self.inputs.iter().find(|i| i.role == role).map(|i| PathBuf::from(&i.path))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let p = dir.join(RUN_FILE);
        let text = serde_json::to_string_pretty(self).expect("run record serializes");
        fs::write(&p, text + "\n").map_err(|e| CliError::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(RUN_FILE);
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::io(&p, e))
    }
}

fn digest(role: &str, path: &Path, keep: impl Fn(&Path) -> bool) -> Result<InputDigest> {
    let mut h = Sha256::new();
    let mut files = 0;
    if path.is_dir() {
        let walker = WalkDir::new(path).sort_by_file_name();
        for entry in walker {
            let entry = entry.map_err(|e| CliError::io(path, e))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(path).expect("walk stays under root");
            if rel == Path::new(RUN_FILE) || !keep(rel) {
                continue;
            }
            let bytes = fs::read(entry.path()).map_err(|e| CliError::io(entry.path(), e))?;
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
            files += 1;
        }
    } else {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        h.update(&bytes);
        files = 1;
    }
    let abs = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
    Ok(InputDigest {
        role: role.to_string(),
        path: abs.display().to_string(),
        files,
        sha256: h.finalize().iter().map(|b| format!("{b:02x}")).collect(),
    })
}
