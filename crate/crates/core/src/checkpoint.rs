//! Checkpoint directories: `manifest.json` plus `weights.bin`
//! (little-endian f32 values concatenated in manifest order).

use std::fs;
use std::path::Path;

use numcore::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VlkdError};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Pre-distillation held-out infilling perplexity, when known.
    pub p0: Option<f64>,
    pub extras: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A checkpoint held in memory: the manifest and one tensor per entry.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    /// Collects every parameter of each `(prefix, store)` as `prefix.name`.
    pub fn from_stores(
        kind: &str,
        seed: u64,
        config: serde_json::Value,
        p0: Option<f64>,
        extras: serde_json::Value,
        stores: &[(&str, &ParamStore<f32>)],
    ) -> Self {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (prefix, store) in stores {
            for (_, p) in store.iter() {
                entries.push(TensorEntry {
                    name: format!("{prefix}.{}", p.name),
                    shape: p.tensor.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                    frozen: p.frozen,
                });
                offset += p.tensor.numel() * 4;
                tensors.push(Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec()).expect("consistent"));
            }
        }
        Checkpoint {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                kind: kind.into(),
                seed,
                config,
                p0,
                extras,
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bytes = Vec::new();
        for t in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join(WEIGHTS), bytes)?;
        let mut json = serde_json::to_vec_pretty(&self.manifest)?;
        json.push(b'\n');
        fs::write(dir.join(MANIFEST), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.exists() {
            return Err(VlkdError::Missing {
                what: "checkpoint",
                path: dir.display().to_string(),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)
            .map_err(|e| VlkdError::Format(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(VlkdError::Format(format!(
                "format_version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let bytes = fs::read(dir.join(WEIGHTS))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected = 0;
        let mut seen = std::collections::BTreeSet::new();
        for e in &manifest.tensors {
            if !seen.insert(e.name.as_str()) {
                return Err(VlkdError::Format(format!("tensor `{}` listed twice", e.name)));
            }
            if e.dtype != "f32" {
                return Err(VlkdError::Format(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected {
                return Err(VlkdError::Format(format!("tensor `{}` has offset {} (expected {expected})", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > bytes.len() {
                return Err(VlkdError::Format(format!("tensor `{}` runs past the end of the weights", e.name)));
            }
            let data = bytes[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(e.shape.clone(), data).map_err(|err| VlkdError::Format(err.to_string()))?);
            expected = end;
        }
        if expected != bytes.len() {
            return Err(VlkdError::Format(format!(
                "weights hold {} bytes but the manifest describes {expected}",
                bytes.len()
            )));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.manifest.tensors.iter().any(|e| e.name.starts_with(&p))
    }

    /// Copies every `prefix.*` tensor into the same-named store parameter.
    /// Names and shapes must match one to one.
    pub fn restore(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let p = format!("{prefix}.");
        let mut matched = 0;
        for (e, t) in self.manifest.tensors.iter().zip(&self.tensors) {
            let Some(name) = e.name.strip_prefix(&p) else { continue };
            let id = store
                .id(name)
                .ok_or_else(|| VlkdError::Format(format!("checkpoint tensor `{}` has no matching parameter", e.name)))?;
            let dst = store.param_mut(id);
            if dst.tensor.shape() != t.shape() {
                return Err(VlkdError::Format(format!(
                    "tensor `{}` has shape {:?} but the model expects {:?}",
                    e.name,
                    t.shape(),
                    dst.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(t.data());
            dst.frozen = e.frozen;
            matched += 1;
        }
        if matched != store.len() {
            return Err(VlkdError::Format(format!(
                "checkpoint provides {matched} of {} `{prefix}` parameters",
                store.len()
            )));
        }
        Ok(())
    }
}
