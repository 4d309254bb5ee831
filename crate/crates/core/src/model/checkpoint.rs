//! Checkpoint directories: `manifest.json` plus one little-endian blob per
//! tensor. Loading verifies every blob hash and rebuilds the registry layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::cache::sha256_hex;
use crate::data::TaskProtocol;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState, ParamGroup, Parameter, PromptSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub build_id: String,
    pub config_hash: String,
    pub config: ModelConfig,
    pub protocol: TaskProtocol,
    pub step: usize,
    pub prompt_sets: Vec<PromptSet>,
    pub frozen_mask: BTreeMap<String, bool>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointManifest {
    /// Hash over every tensor hash in registry order; equal states give
    /// equal digests.
    pub fn state_digest(&self) -> String {
        let joined: String = self.tensors.iter().map(|t| t.sha256.as_str()).collect();
        sha256_hex(joined.as_bytes())
    }
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn save_checkpoint<T: Scalar>(
    state: &ModelState<T>,
    dir: &Path,
    config_hash: &str,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(state.params().len());
    for p in state.params() {
        let mut blob = Vec::with_capacity(p.value.len() * T::BYTES);
        for v in p.value.data() {
            v.write_le(&mut blob);
        }
        let file = format!("{}.bin", p.name);
        let path = dir.join(&file);
        fs::write(&path, &blob).map_err(|e| Error::io(&path, e))?;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            shape: p.value.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            file,
            sha256: sha256_hex(&blob),
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        build_id: crate::BUILD_ID.to_string(),
        config_hash: config_hash.to_string(),
        config: state.config.clone(),
        protocol: state.protocol.clone(),
        step: state.current_step(),
        prompt_sets: state.prompt_sets.clone(),
        frozen_mask: state.frozen_mask(),
        tensors,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(ModelState<T>, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            m.format_version
        )));
    }
    let mut params = Vec::with_capacity(m.tensors.len());
    let mut frozen = BTreeMap::new();
    for entry in &m.tensors {
        if entry.dtype != T::DTYPE {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {} stored as {}, model expects {}",
                entry.name,
                entry.dtype,
                T::DTYPE
            )));
        }
        let path = dir.join(&entry.file);
        let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&blob) != entry.sha256 {
            return Err(Error::Checkpoint(format!(
                "hash of {} does not match the manifest",
                path.display()
            )));
        }
        let n: usize = entry.shape.iter().product();
        if blob.len() != n * T::BYTES {
            return Err(Error::Checkpoint(format!(
                "{} holds {} bytes, shape {:?} needs {}",
                path.display(),
                blob.len(),
                entry.shape,
                n * T::BYTES
            )));
        }
        let data = blob.chunks_exact(T::BYTES).map(T::read_le).collect();
        let label = entry.group.label();
        let is_frozen = *m.frozen_mask.get(&label).ok_or_else(|| {
            Error::Checkpoint(format!("frozen mask has no entry for group {label}"))
        })?;
        frozen.insert(entry.group, is_frozen);
        params.push(Parameter {
            name: entry.name.clone(),
            group: entry.group,
            value: Tensor::from_vec(&entry.shape, data)?,
        });
    }
    let state = ModelState::from_parts(
        m.config.clone(),
        m.protocol.clone(),
        m.prompt_sets.clone(),
        params,
        frozen,
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((state, m))
}
