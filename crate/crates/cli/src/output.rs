//! Output directory bookkeeping and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Collects every file written to the output directory with its hash.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    files: Vec<FileHash>,
    inputs: Vec<FileHash>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileHash {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_str(&mut self, name: &str, text: &str) -> Result<()> {
        self.write(name, text.as_bytes())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_model(&mut self, name: &str, model: &liftprune::Model) -> Result<()> {
        let mut buf = Vec::new();
        liftprune::net::write_model(model, &mut buf)?;
        self.write(name, &buf)
    }

    /// Reads an input file and records its hash.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(liftprune::Error::Io).with_context(|| format!("reading {}", path.display()))?;
        let entry = FileHash {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        };
        if !self.inputs.contains(&entry) {
            self.inputs.push(entry);
        }
        Ok(bytes)
    }

    /// Writes `manifest.json`. Everything except `timestamp` is determined by
    /// the configuration and the input files.
    pub fn finish(mut self, command: &str, config: &Value, metrics: Value) -> Result<()> {
        let config_text = serde_json::to_string(config)?;
        let manifest = serde_json::json!({
            "tool": "liftprune",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": config.get("seed"),
            "config": config,
            "config_sha256": sha256_hex(config_text.as_bytes()),
            "inputs": self.inputs,
            "outputs": self.files,
            "metrics": metrics,
            "timestamp": SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.path("manifest.json");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.files.clear();
        Ok(())
    }
}
