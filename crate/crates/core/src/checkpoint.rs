//! Checkpoint directory: `manifest.json` plus a little-endian `params.bin` blob.
//!
//! The manifest echoes the model configuration, the resolved HTT split and TT
//! initialization, and a directory entry (name, shape, byte offset, SHA-256) per
//! parameter. Loading verifies every hash and refuses configurations that differ
//! from the expected one, naming each differing field.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::HttSplit;
use crate::config::ModelConfig;
use crate::error::{bail, Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "hyperfm-checkpoint-1";
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub crate_version: String,
    pub dtype: String,
    pub config: ModelConfig,
    pub htt_split: HttSplit,
    /// Standard deviation each TT core element was drawn from.
    pub tt_init_std: Option<f64>,
    pub group_sizes: Vec<usize>,
    pub param_count: usize,
    pub params: Vec<ParamEntry>,
    pub blob_bytes: u64,
    pub blob_sha256: String,
    /// Free-form run metadata (target transforms, data hashes, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Field-by-field differences between two configurations, as `field: a → b`.
pub fn config_diff(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let a = serde_json::to_value(expected).expect("config serializes");
    let b = serde_json::to_value(found).expect("config serializes");
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        return vec!["config is not an object".into()];
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: {v} → {}", b.get(k).cloned().unwrap_or_default()))
        .collect()
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, model: &Model<T>, extra: serde_json::Value) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut params = Vec::new();
    for (_, p) in model.store.iter() {
        let offset = blob.len() as u64;
        let start = blob.len();
        for &v in p.value.data() {
            v.write_le(&mut blob);
        }
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            sha256: sha(&blob[start..]),
        });
    }
    let split = model.config.split()?;
    let manifest = Manifest {
        format: FORMAT.into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        dtype: T::DTYPE.into(),
        config: model.config.clone(),
        tt_init_std: split.tt.as_ref().map(|s| s.init_std()),
        htt_split: split,
        group_sizes: model.encoder.embed.spec.sizes(),
        param_count: model.store.count(),
        params,
        blob_bytes: blob.len() as u64,
        blob_sha256: sha(&blob),
        extra,
    };
    fs::write(dir.join(BLOB), &blob)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        bail!(Manifest, "format: expected {FORMAT}, found {}", m.format);
    }
    Ok(m)
}

/// Loads a checkpoint, optionally requiring its configuration to equal `expected`.
pub fn load_checkpoint<T: Scalar>(dir: &Path, expected: Option<&ModelConfig>) -> Result<(Model<T>, Manifest)> {
    let manifest = read_manifest(dir)?;
    if let Some(exp) = expected {
        let diff = config_diff(exp, &manifest.config);
        if !diff.is_empty() {
            return Err(Error::Manifest(format!("configuration differs: {}", diff.join("; "))));
        }
    }
    if manifest.dtype != T::DTYPE {
        bail!(Manifest, "dtype: expected {}, found {}", T::DTYPE, manifest.dtype);
    }
    let blob = fs::read(dir.join(BLOB))?;
    let found = sha(&blob);
    if found != manifest.blob_sha256 || blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Hash {
            what: BLOB.into(),
            expected: manifest.blob_sha256.clone(),
            found,
        });
    }
    let mut model = Model::<T>::new(manifest.config.clone())?;
    let resolved = manifest.config.split()?;
    if resolved != manifest.htt_split {
        bail!(Manifest, "htt_split: manifest records {:?}, configuration resolves to {:?}", manifest.htt_split, resolved);
    }
    if model.store.len() != manifest.params.len() {
        bail!(
            Manifest,
            "parameter directory has {} entries, model has {}",
            manifest.params.len(),
            model.store.len()
        );
    }
    for entry in &manifest.params {
        let Some(id) = model.store.find(&entry.name) else {
            bail!(Manifest, "parameter {} does not exist in this architecture", entry.name);
        };
        if model.store.value(id).shape() != entry.shape {
            bail!(
                Manifest,
                "parameter {}: shape {:?} in checkpoint, {:?} in model",
                entry.name,
                entry.shape,
                model.store.value(id).shape()
            );
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * T::BYTES;
        let Some(bytes) = blob.get(start..end) else {
            bail!(Data, "parameter {} runs past the end of {BLOB}", entry.name);
        };
        let got = sha(bytes);
        if got != entry.sha256 {
            return Err(Error::Hash {
                what: entry.name.clone(),
                expected: entry.sha256.clone(),
                found: got,
            });
        }
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        *model.store.value_mut(id) = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok((model, manifest))
}
