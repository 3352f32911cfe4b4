//! Weight files: a 4-byte magic, the manifest length as a little-endian
//! `u64`, a JSON manifest, then one little-endian blob holding every tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numcore::{DType, Scalar, Tensor};

use super::config::ModelConfig;
use super::network::DecoderModel;
use super::ModelError;

pub const MAGIC: &[u8; 4] = b"NDW1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format_version: u32,
    pub dtype: DType,
    pub config: ModelConfig,
    pub blob_len: u64,
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Decoded contents of a weight file.
#[derive(Clone, Debug)]
pub struct TensorArchive<T: Scalar> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub meta: serde_json::Value,
}

fn io_err(path: &Path, e: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

pub fn write_archive<T: Scalar>(
    path: &Path,
    config: &ModelConfig,
    tensors: &BTreeMap<String, Tensor<T>>,
    meta: serde_json::Value,
) -> Result<(), ModelError> {
    let mut blob = Vec::with_capacity(tensors.values().map(|t| t.len()).sum::<usize>() * T::DTYPE.size_of());
    let mut entries = BTreeMap::new();
    for (name, t) in tensors {
        entries.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: T::DTYPE,
                offset: blob.len() as u64,
            },
        );
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = WeightManifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        config: config.clone(),
        blob_len: blob.len() as u64,
        tensors: entries,
        meta,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| ModelError::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    // write-then-rename so a crash never leaves a half-written file in place
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &out).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn decode<T: Scalar>(bytes: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
    }
}

pub fn read_manifest(bytes: &[u8]) -> Result<(WeightManifest, &[u8]), ModelError> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(ModelError::Corrupt("missing weight-file magic".into()));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = &bytes[12..];
    if len > body.len() {
        return Err(ModelError::Corrupt(format!(
            "manifest claims {len} bytes, file holds {}",
            body.len()
        )));
    }
    let manifest: WeightManifest =
        serde_json::from_slice(&body[..len]).map_err(|e| ModelError::Corrupt(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ModelError::Corrupt(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let blob = &body[len..];
    if blob.len() as u64 != manifest.blob_len {
        return Err(ModelError::Corrupt(format!(
            "blob is {} bytes, manifest expects {} (truncated?)",
            blob.len(),
            manifest.blob_len
        )));
    }
    Ok((manifest, blob))
}

pub fn read_archive<T: Scalar>(path: &Path) -> Result<TensorArchive<T>, ModelError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (manifest, blob) = read_manifest(&bytes)?;
    let mut tensors = BTreeMap::new();
    for (name, e) in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * e.dtype.size_of();
        if end > blob.len() {
            return Err(ModelError::Corrupt(format!("tensor {name} runs past the blob")));
        }
        let t = Tensor::from_vec(&e.shape, decode(&blob[start..end], e.dtype))?;
        tensors.insert(name, t);
    }
    Ok(TensorArchive {
        config: manifest.config,
        tensors,
        meta: manifest.meta,
    })
}

/// Keys of the non-trainable tensors saved alongside the weights.
fn bn_keys(block: usize) -> (String, String) {
    (
        format!("block.{block}.conv.bn.running_mean"),
        format!("block.{block}.conv.bn.running_var"),
    )
}

impl<T: Scalar> DecoderModel<T> {
    /// Every parameter plus the batch-norm running statistics, by name.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> =
            self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        for (i, bn) in self.bn.iter().enumerate() {
            let (m, v) = bn_keys(i);
            let d = bn.channels();
            out.insert(m, Tensor::from_vec(&[d], bn.running_mean.clone()).expect("shape"));
            out.insert(v, Tensor::from_vec(&[d], bn.running_var.clone()).expect("shape"));
        }
        out
    }

    /// Overwrites model state from named tensors. Names under `prefix_ignore`
    /// (optimizer sections of a checkpoint) are skipped.
    pub fn apply_state(
        &mut self,
        tensors: &BTreeMap<String, Tensor<T>>,
        prefix_ignore: &str,
    ) -> Result<(), ModelError> {
        let expected = self.state_tensors();
        for name in tensors.keys() {
            if !expected.contains_key(name) && (prefix_ignore.is_empty() || !name.starts_with(prefix_ignore)) {
                return Err(ModelError::UnknownTensor(name.clone()));
            }
        }
        for (name, want) in &expected {
            let got = tensors.get(name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if got.shape() != want.shape() {
                return Err(ModelError::ShapeMismatch {
                    tensor: name.clone(),
                    expected: want.shape().to_vec(),
                    found: got.shape().to_vec(),
                });
            }
        }
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            *self.store.value_mut(id) = tensors[&name].clone();
        }
        for i in 0..self.bn.len() {
            let (m, v) = bn_keys(i);
            self.bn[i].running_mean = tensors[&m].data().to_vec();
            self.bn[i].running_var = tensors[&v].data().to_vec();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<(), ModelError> {
        write_archive(path, &self.cfg, &self.state_tensors(), meta)
    }

    /// Loads weights into this model, whose configuration must match the
    /// file's tensor shapes. Returns the file's metadata.
    pub fn load_weights(&mut self, path: &Path) -> Result<serde_json::Value, ModelError> {
        let archive = read_archive::<T>(path)?;
        self.apply_state(&archive.tensors, "optim.")?;
        Ok(archive.meta)
    }

    /// Builds a model from the configuration stored in a weight file.
    pub fn from_file(path: &Path) -> Result<(Self, serde_json::Value), ModelError> {
        let archive = read_archive::<T>(path)?;
        let mut model = DecoderModel::new(archive.config.clone(), &mut crate::numcore::RngStream::new(0))?;
        model.apply_state(&archive.tensors, "optim.")?;
        Ok((model, archive.meta))
    }
}
