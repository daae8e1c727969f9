//! Checkpoint archive: a safetensors file holding every named array, with a
//! JSON manifest stored under the `manifest` metadata key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::discriminator::CriticConfig;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

pub const GENERATOR_PREFIX: &str = "generator/";
pub const CRITIC_GLOBAL_PREFIX: &str = "critic_global/";
pub const CRITIC_LOCAL_PREFIX: &str = "critic_local/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub epoch: usize,
    pub iteration: u64,
    pub config_fingerprint: String,
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub dtype: String,
    pub arrays: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Tensors under `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
            .collect()
    }

    /// Copies the `prefix` section into `store`. Every parameter and buffer
    /// of the store must be present with a matching shape.
    pub fn load_into(&self, store: &ParamStore, prefix: &str) -> Result<()> {
        for (name, var) in store.state() {
            let key = format!("{prefix}{name}");
            let t = self.tensors.get(&key).ok_or_else(|| Error::MissingArray(key.clone()))?;
            if t.dims() != var.dims() {
                return Err(Error::ShapeMismatch {
                    name: key,
                    found: t.dims().to_vec(),
                    expected: var.dims().to_vec(),
                });
            }
        }
        for (name, _) in store.state() {
            store.assign(name, &self.tensors[&format!("{prefix}{name}")])?;
        }
        Ok(())
    }

    /// Rebuilds the generator described by the manifest.
    pub fn generator(&self, device: &Device) -> Result<Generator> {
        let dtype = match self.manifest.dtype.as_str() {
            "f64" => candle_core::DType::F64,
            _ => candle_core::DType::F32,
        };
        let g = Generator::new(self.manifest.generator.clone(), dtype, device, 0)?;
        self.load_into(g.store(), GENERATOR_PREFIX)?;
        Ok(g)
    }
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut manifest = ckpt.manifest.clone();
    manifest.arrays = ckpt
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), t.dims().to_vec()))
        .collect();
    let meta: HashMap<String, String> =
        [(MANIFEST_KEY.to_string(), serde_json::to_string(&manifest)?)].into();
    let contiguous: Vec<(String, Tensor)> = ckpt
        .tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    let bytes = safetensors::serialize(contiguous.iter().map(|(k, t)| (k.as_str(), t)), Some(meta))
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let manifest_json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::CorruptCheckpoint("missing manifest".into()))?;
    let manifest: Manifest = serde_json::from_str(manifest_json)
        .map_err(|e| Error::CorruptCheckpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load_buffer(&bytes, device)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?
        .into_iter()
        .collect();
    for (name, dims) in &manifest.arrays {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("array `{name}` listed but absent")))?;
        if t.dims() != dims.as_slice() {
            return Err(Error::CorruptCheckpoint(format!("array `{name}` disagrees with manifest")));
        }
    }
    Ok(Checkpoint { manifest, tensors })
}
