//! Checkpoint format: `params.bin` holds the named parameter arrays as
//! little-endian float32 in manifest order; `manifest.json` records each
//! entry's name, shape, and element offset plus the full config block
//! needed to rebuild the model and its queries.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_model_params, ModelConfig};
use crate::params::ParamSet;
use crate::report::QuerySet;
use crate::text::ProviderConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub query_set: QuerySet,
    pub provider: ProviderConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    entries: Vec<EntryMeta>,
    config: CheckpointConfig,
}

pub struct Checkpoint {
    pub params: ParamSet,
    pub config: CheckpointConfig,
}

fn validate_config(cfg: &CheckpointConfig) -> Result<()> {
    cfg.model.validate()?;
    if cfg.provider.d_t != cfg.model.d_t {
        return Err(Error::Compat(format!(
            "provider width {} does not match the model's text width {}",
            cfg.provider.d_t, cfg.model.d_t
        )));
    }
    if cfg.query_set.n() == 0 || cfg.query_set.m() == 0 {
        return Err(Error::Compat("checkpoint query set is empty".into()));
    }
    Ok(())
}

/// Write `dir/params.bin` and `dir/manifest.json`; both are replaced
/// atomically via a rename so a crash never leaves a half checkpoint.
pub fn save_checkpoint(dir: &Path, params: &ParamSet, config: &CheckpointConfig) -> Result<()> {
    validate_config(config)?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut bytes = Vec::new();
    let mut offset = 0usize;
    for i in 0..params.len() {
        let name = params.name_at(i).to_string();
        let value = params.value_at(i);
        entries.push(EntryMeta { name, shape: value.shape().to_vec(), offset });
        for &v in value.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += value.len();
    }
    let manifest = CheckpointManifest { entries, config: config.clone() };

    let tmp_bin = dir.join("params.bin.tmp");
    fs::write(&tmp_bin, &bytes)?;
    fs::rename(&tmp_bin, dir.join("params.bin"))?;
    let tmp_manifest = dir.join("manifest.json.tmp");
    fs::write(&tmp_manifest, serde_json::to_string_pretty(&manifest)?)?;
    fs::rename(&tmp_manifest, dir.join("manifest.json"))?;
    Ok(())
}

/// Read a checkpoint back, verifying the config block, the byte layout,
/// and that every parameter the config implies is present with its shape.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Input(format!("checkpoint manifest {}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Compat(format!("checkpoint manifest {}: {e}", manifest_path.display())))?;
    validate_config(&manifest.config)?;

    let bin = fs::read(dir.join("params.bin"))?;
    let total: usize = manifest.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bin.len() != total * 4 {
        return Err(Error::Compat(format!(
            "params.bin holds {} bytes, manifest implies {}",
            bin.len(),
            total * 4
        )));
    }

    let mut params = ParamSet::new();
    let mut expect_offset = 0usize;
    for e in &manifest.entries {
        if e.offset != expect_offset {
            return Err(Error::Compat(format!(
                "entry {} at offset {}, expected {expect_offset}",
                e.name, e.offset
            )));
        }
        let count: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let at = (e.offset + i) * 4;
            let v = f32::from_le_bytes(bin[at..at + 4].try_into().expect("length checked"));
            data.push(v as f64);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|err| Error::Compat(format!("entry {}: {err}", e.name)))?;
        params.insert(&e.name, arr)?;
        expect_offset += count;
    }

    // every parameter the config implies must be present with its shape;
    // extra entries (fine-tuning heads) are allowed
    let reference = init_model_params(&manifest.config.model, 0)?;
    for i in 0..reference.len() {
        let name = reference.name_at(i);
        let Some(found) = params.get(name) else {
            return Err(Error::Compat(format!("checkpoint is missing parameter {name}")));
        };
        if found.shape() != reference.value_at(i).shape() {
            return Err(Error::Compat(format!(
                "parameter {name} has shape {:?}, config implies {:?}",
                found.shape(),
                reference.value_at(i).shape()
            )));
        }
    }
    Ok(Checkpoint { params, config: manifest.config })
}

/// Round-trip error of one float64 value through the f32 storage format.
pub fn f32_roundtrip(v: f64) -> f64 {
    (v as f32) as f64
}

/// Largest absolute difference the save/load cycle introduces.
pub fn quantization_error(params: &ParamSet) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        for &v in params.value_at(i).iter() {
            worst = worst.max((v - f32_roundtrip(v)).abs());
        }
    }
    worst
}
