use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    fn of(path: &Path, data: &[u8]) -> Self {
        Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(data),
            bytes: data.len() as u64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Settings after merging flags, config file and defaults.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn sha256_hex(data: &[u8]) -> String {
    format!("{:x}", Sha256::digest(data))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Records every file a command reads or writes, then writes the manifest.
pub struct Run {
    manifest: RunManifest,
    location: PathBuf,
}

impl Run {
    /// `location` is the manifest path.
    pub fn new(command: &str, location: PathBuf) -> Self {
        Run {
            manifest: RunManifest {
                command: command.to_owned(),
                args: std::env::args().skip(1).collect(),
                config: serde_json::Value::Null,
                seeds: vec![],
                inputs: vec![],
                outputs: vec![],
                tool_version: env!("CARGO_PKG_VERSION").to_owned(),
                started_unix: now(),
                finished_unix: 0,
            },
            location,
        }
    }

    /// Manifest inside an output directory.
    pub fn in_dir(command: &str, dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Run::new(command, dir.join("manifest.json")))
    }

    /// Manifest next to a single output file: `<file>.manifest.json`.
    pub fn beside(command: &str, file: &Path) -> anyhow::Result<Self> {
        if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let mut name = file.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        Ok(Run::new(command, file.with_file_name(name)))
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T) -> anyhow::Result<()> {
        self.manifest.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn add_seeds(&mut self, seeds: &[u64]) {
        self.manifest.seeds.extend_from_slice(seeds);
    }

    pub fn read(&mut self, path: &Path) -> anyhow::Result<Vec<u8>> {
        let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.manifest.inputs.push(Artifact::of(path, &data));
        Ok(data)
    }

    pub fn read_string(&mut self, path: &Path) -> anyhow::Result<String> {
        let data = self.read(path)?;
        String::from_utf8(data).with_context(|| format!("{} is not UTF-8", path.display()))
    }

    pub fn write(&mut self, path: &Path, data: &[u8]) -> anyhow::Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, data).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.push(Artifact::of(path, data));
        Ok(())
    }

    pub fn finish(mut self) -> anyhow::Result<RunManifest> {
        self.manifest.finished_unix = now();
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(&self.location, text).with_context(|| format!("writing {}", self.location.display()))?;
        Ok(self.manifest)
    }
}
