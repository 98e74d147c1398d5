//! Run manifests: what a command was given and what it resolved to.

use std::fs;
use std::path::{Path, PathBuf};

use hyperfm::Result;
use hyperfm_datapipe::pipeline::sha256_hex;
use serde::Serialize;
use serde_json::Value;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub crate_version: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<InputHash>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
        })
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: sha256_hex(&fs::read(path)?),
        });
        Ok(self)
    }

    pub fn inputs<'a>(mut self, paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<Self> {
        for p in paths {
            self = self.input(p)?;
        }
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// `<file>.run.json` beside an output file.
pub fn beside(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}
