//! On-disk model format.
//!
//! ```text
//! "LNPM" | version: u32 LE | manifest_len: u64 LE | manifest (JSON) | blob
//! ```
//!
//! The blob is every parameter tensor as little-endian `f32`, concatenated in
//! manifest order (per layer: weights, then bias).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CouplingGroup, GraphError, LayerKind, LayerSpec, ModelGraph, Src};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LNPM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("model file truncated: {0}")]
    Truncated(String),
    #[error("model file has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("manifest inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    input_shape: [usize; 3],
    layers: Vec<LayerEntry>,
    coupling_groups: Vec<CouplingGroup>,
    output_shapes: Vec<Vec<usize>>,
    param_floats: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    id: String,
    kind: LayerKind,
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_shape: Option<Vec<usize>>,
}

impl ModelGraph {
    /// Serialize into the model file format. Output is a pure function of the graph.
    pub fn to_bytes(&self) -> Vec<u8> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerEntry {
                id: l.id.clone(),
                kind: l.kind.clone(),
                inputs: l
                    .inputs
                    .iter()
                    .map(|s| match *s {
                        Src::Input => "input".to_string(),
                        Src::Layer(j) => self.layers[j].id.clone(),
                    })
                    .collect(),
                weights_shape: l.weights.as_ref().map(|t| t.shape().to_vec()),
                bias_shape: l.bias.as_ref().map(|t| t.shape().to_vec()),
            })
            .collect();
        let manifest = Manifest {
            input_shape: self.input_shape,
            layers,
            coupling_groups: self.coupling_groups.clone(),
            output_shapes: self.shapes.iter().map(|s| s[1..].to_vec()).collect(),
            param_floats: self.param_count(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + 4 * manifest.param_floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for layer in &self.layers {
            for t in [&layer.weights, &layer.bias].into_iter().flatten() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph, ModelIoError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ModelIoError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(ModelIoError::Truncated("header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(ModelIoError::UnsupportedVersion(version));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest_end = HEADER_LEN
            .checked_add(manifest_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| ModelIoError::Truncated("manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])?;
        let blob = &bytes[manifest_end..];
        let expected = manifest
            .param_floats
            .checked_mul(4)
            .ok_or_else(|| ModelIoError::Inconsistent("parameter count overflows".into()))?;
        if blob.len() < expected {
            return Err(ModelIoError::Truncated(format!(
                "expected {expected} parameter bytes, found {}",
                blob.len()
            )));
        }
        if blob.len() > expected {
            return Err(ModelIoError::TrailingBytes(blob.len() - expected));
        }

        let mut floats = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut take = |shape: &[usize]| -> Result<Tensor, ModelIoError> {
            let len: usize = shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(len).collect();
            if data.len() != len {
                return Err(ModelIoError::Inconsistent(
                    "parameter shapes exceed the declared blob".into(),
                ));
            }
            Tensor::new(shape.to_vec(), data)
                .map_err(|e| ModelIoError::Inconsistent(e.to_string()))
        };
        let mut layers: Vec<LayerSpec> = Vec::with_capacity(manifest.layers.len());
        for entry in &manifest.layers {
            let inputs = entry
                .inputs
                .iter()
                .map(|name| {
                    if name == "input" {
                        Ok(Src::Input)
                    } else {
                        layers
                            .iter()
                            .position(|l| &l.id == name)
                            .map(Src::Layer)
                            .ok_or_else(|| {
                                ModelIoError::Inconsistent(format!(
                                    "layer `{}` reads unknown or later layer `{name}`",
                                    entry.id
                                ))
                            })
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut spec = LayerSpec::new(entry.id.clone(), entry.kind.clone(), inputs);
            if let Some(shape) = &entry.weights_shape {
                spec.weights = Some(take(shape)?);
            }
            if let Some(shape) = &entry.bias_shape {
                spec.bias = Some(take(shape)?);
            }
            layers.push(spec);
        }
        if floats.next().is_some() {
            return Err(ModelIoError::Inconsistent(
                "declared parameter count exceeds layer shapes".into(),
            ));
        }
        let graph = ModelGraph::new(manifest.input_shape, layers)?;
        if graph.coupling_groups != manifest.coupling_groups {
            return Err(ModelIoError::Inconsistent(
                "coupling groups differ from the layer topology".into(),
            ));
        }
        let shapes: Vec<Vec<usize>> = graph.shapes.iter().map(|s| s[1..].to_vec()).collect();
        if shapes != manifest.output_shapes {
            return Err(ModelIoError::Inconsistent("recorded shapes differ".into()));
        }
        Ok(graph)
    }
}

/// Write `graph` to `path` atomically (temp file + rename). Returns the byte count.
pub fn save_model(graph: &ModelGraph, path: &Path) -> Result<u64, ModelIoError> {
    let bytes = graph.to_bytes();
    write_atomic(path, &bytes).map_err(|source| ModelIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(bytes.len() as u64)
}

pub fn load_model(path: &Path) -> Result<ModelGraph, ModelIoError> {
    let bytes = std::fs::read(path).map_err(|source| ModelIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ModelGraph::from_bytes(&bytes)
}

/// Write through a temporary sibling file and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
