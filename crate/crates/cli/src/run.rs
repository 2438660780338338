//! Timestamped run directories with an echoed config and a checksummed manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    created: String,
    seed: u64,
    inputs: &'a [FileRecord],
    outputs: &'a [FileRecord],
}

pub struct RunDir {
    pub path: PathBuf,
    pub command: String,
    seed: u64,
    created: String,
    inputs: Vec<FileRecord>,
    outputs: BTreeMap<String, PathBuf>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Checksums every file under `path` (or `path` itself), sorted by path.
pub fn sha256_tree(path: &Path) -> Result<String> {
    if path.is_file() {
        return sha256_file(path);
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
        h.update(sha256_file(&f)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

impl RunDir {
    /// Creates `<out>/<YYYYmmdd-HHMMSS>-<command>`, adding a numeric suffix
    /// if that name is taken, and writes the resolved config into it.
    pub fn create(cfg: &RunConfig, command: &str) -> Result<Self> {
        let out = PathBuf::from(&cfg.paths.out);
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let now = chrono::Local::now();
        let stem = format!("{}-{command}", now.format("%Y%m%d-%H%M%S"));
        let mut path = out.join(&stem);
        let mut k = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = out.join(format!("{stem}-{k}"));
                    k += 1;
                }
                Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
            }
        }
        fs::write(path.join(CONFIG_FILE), cfg.to_toml())?;
        Ok(Self {
            path,
            command: command.to_string(),
            seed: cfg.seed,
            created: now.to_rfc3339(),
            inputs: Vec::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_tree(path)?;
        let path = path.display().to_string();
        if !self.inputs.iter().any(|r| r.path == path) {
            self.inputs.push(FileRecord { path, sha256 });
        }
        Ok(())
    }

    /// Registers a file or directory inside the run directory as an output.
    pub fn record_output(&mut self, name: &str) {
        self.outputs.insert(name.to_string(), self.file(name));
    }

    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        write_csv(&self.file(name), rows)?;
        self.record_output(name);
        Ok(())
    }

    pub fn write_manifest(&self) -> Result<()> {
        let outputs = self
            .outputs
            .iter()
            .filter(|(_, p)| p.exists())
            .map(|(name, p)| Ok(FileRecord {
                path: name.clone(),
                sha256: sha256_tree(p)?,
            }))
            .collect::<Result<Vec<_>>>()?;
        let m = Manifest {
            command: &self.command,
            created: self.created.clone(),
            seed: self.seed,
            inputs: &self.inputs,
            outputs: &outputs,
        };
        fs::write(self.file(MANIFEST_FILE), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn output_names(&self) -> Vec<String> {
        self.outputs.keys().cloned().collect()
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
