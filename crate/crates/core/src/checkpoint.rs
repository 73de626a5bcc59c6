//! Directory checkpoints: `manifest.json` plus one little-endian f64 blob.
//!
//! ```text
//! manifest.json  {format_version, tensors: [{name, shape, dtype, offset, length}], meta}
//! weights.bin    tensors concatenated in manifest order
//! ```
//!
//! Offsets and lengths are in bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adr::AdrRecord;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ToyEnhancer};
use crate::numerics::Tensor;
use crate::params::Parameterized;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";
const DTYPE: &str = "f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub meta: Value,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serialise named tensors into `(manifest, blob)`.
pub fn encode(tensors: &[(String, Tensor)], meta: Value) -> (Manifest, Vec<u8>) {
    let total: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut blob = Vec::with_capacity(total);
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: DTYPE.to_string(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tensors: entries,
        meta,
    };
    (manifest, blob)
}

/// Validate `manifest` against `blob` and rebuild the tensors.
pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut end = 0u64;
    for (i, e) in manifest.tensors.iter().enumerate() {
        if e.dtype != DTYPE {
            return Err(ckpt_err(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if i > 0 && e.offset < end {
            return Err(ckpt_err(format!("{}: overlapping offset {}", e.name, e.offset)));
        }
        let count: usize = e.shape.iter().product();
        if e.length != 8 * count as u64 {
            return Err(ckpt_err(format!(
                "{}: length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        let stop = e
            .offset
            .checked_add(e.length)
            .filter(|&s| s <= blob.len() as u64)
            .ok_or_else(|| ckpt_err(format!("{}: extends past the end of the blob", e.name)))?;
        let bytes = &blob[e.offset as usize..stop as usize];
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| ckpt_err(format!("{}: {err}", e.name)))?;
        out.push((e.name.clone(), t));
        end = stop;
    }
    Ok(out)
}

/// Write a tensor store to directory `dir`.
pub fn write_store(dir: &Path, tensors: &[(String, Tensor)], meta: Value) -> Result<()> {
    let (manifest, blob) = encode(tensors, meta);
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

/// Read a tensor store written by [`write_store`].
pub fn read_store(dir: &Path) -> Result<(Vec<(String, Tensor)>, Value)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| ckpt_err(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ckpt_err(format!("malformed manifest: {e}")))?;
    let blob = fs::read(dir.join(BLOB_FILE))
        .map_err(|e| ckpt_err(format!("{}: {e}", dir.join(BLOB_FILE).display())))?;
    let tensors = decode(&manifest, &blob)?;
    Ok((tensors, manifest.meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub model: ModelConfig,
    /// One entry per decoder stage.
    pub adr: Vec<Option<AdrRecord>>,
}

/// Named tensors of any parameterised module, in visit order.
pub fn named_tensors<M: Parameterized + ?Sized>(module: &M) -> Vec<(String, Tensor)> {
    module
        .named_params()
        .into_iter()
        .map(|(n, _, t)| (n, t))
        .collect()
}

/// Load tensors into `module`, requiring names to match in visit order.
pub fn load_into<M: Parameterized + ?Sized>(module: &mut M, tensors: &[(String, Tensor)]) -> Result<()> {
    let expected: Vec<String> = module.named_params().into_iter().map(|(n, _, _)| n).collect();
    let found: Vec<&String> = tensors.iter().map(|(n, _)| n).collect();
    if expected.len() != found.len() || expected.iter().zip(&found).any(|(a, b)| a != *b) {
        return Err(ckpt_err("tensor names do not match the model layout"));
    }
    let values: Vec<Tensor> = tensors.iter().map(|(_, t)| t.clone()).collect();
    module
        .load_params(&values)
        .map_err(|e| ckpt_err(format!("incompatible tensors: {e}")))
}

pub fn save_model(dir: &Path, model: &ToyEnhancer) -> Result<()> {
    let meta = ModelMeta {
        model: *model.config(),
        adr: model.adr_records(),
    };
    write_store(dir, &named_tensors(model), serde_json::to_value(meta)?)
}

pub fn load_model(dir: &Path) -> Result<ToyEnhancer> {
    let (tensors, meta) = read_store(dir)?;
    let meta: ModelMeta =
        serde_json::from_value(meta).map_err(|e| ckpt_err(format!("malformed model meta: {e}")))?;
    let mut model = ToyEnhancer::new(meta.model).map_err(|e| ckpt_err(e.to_string()))?;
    load_into(&mut model, &tensors)?;
    if meta.adr.len() != 2 {
        return Err(ckpt_err("expected one reallocation record per decoder stage"));
    }
    for (stage, record) in model.decoder_mut().iter_mut().zip(&meta.adr) {
        match (&mut stage.attn.adr, record) {
            (Some(block), Some(rec)) => {
                if block.record().d_c != rec.d_c || block.d_m() != rec.d_m || block.d_k() != rec.d_k {
                    return Err(ckpt_err("reallocation record disagrees with model config"));
                }
                if rec.gen1.frozen {
                    block.gen1_mut().freeze()?;
                }
                if rec.gen2.frozen {
                    block.gen2_mut().freeze()?;
                }
            }
            (None, None) => {}
            _ => return Err(ckpt_err("reallocation records disagree with model config")),
        }
    }
    Ok(model)
}
