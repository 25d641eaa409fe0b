//! Checkpoint file: 64-byte magic/version header, JSON block (model config,
//! step, seed, parameter manifest with names/shapes/offsets), then a
//! little-endian float32 payload. Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::FormatError;
use crate::tensor::Tensor;

use super::{ModelConfig, ParameterSet};

pub const MAGIC: &[u8; 8] = b"EMCCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the parameter section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    step: u64,
    seed: u64,
    manifest: Vec<ManifestEntry>,
    has_adam: bool,
}

/// Trainable state at one step: parameters and, when present, the Adam
/// moment accumulators aligned with the manifest order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub params: ParameterSet<f32>,
    pub adam: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut manifest = Vec::new();
        let mut offset = 0usize;
        for (name, t) in self.params.iter() {
            manifest.push(ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let meta = CheckpointMeta {
            model: self.model.clone(),
            step: self.step,
            seed: self.seed,
            manifest,
            has_adam: self.adam.is_some(),
        };
        let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");

        let mut header = [0u8; HEADER_LEN];
        header[..8].copy_from_slice(MAGIC);
        header[8..12].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        header[12..16].copy_from_slice(&(json.len() as u32).to_le_bytes());

        let io_err = |source| FormatError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(&header).map_err(io_err)?;
        f.write_all(&json).map_err(io_err)?;
        let mut write_tensors = |ts: &mut dyn Iterator<Item = &Tensor<f32>>| {
            let mut buf = Vec::new();
            for t in ts {
                buf.clear();
                buf.reserve(t.len() * 4);
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                f.write_all(&buf)?;
            }
            Ok::<(), std::io::Error>(())
        };
        write_tensors(&mut self.params.tensors()).map_err(io_err)?;
        if let Some((m, v)) = &self.adam {
            write_tensors(&mut m.iter()).map_err(io_err)?;
            write_tensors(&mut v.iter()).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let p = || path.to_path_buf();
        let bytes = fs::read(path).map_err(|source| FormatError::Io {
            path: p(),
            source,
        })?;
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(FormatError::BadMagic { path: p() });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(FormatError::BadVersion { path: p(), version });
        }
        let json_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[HEADER_LEN..HEADER_LEN + json_len])
            .map_err(|source| FormatError::BadHeaderJson { path: p(), source })?;

        let payload = &bytes[HEADER_LEN + json_len..];
        let param_count: usize = meta
            .manifest
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        let sections = if meta.has_adam { 3 } else { 1 };
        let expected = param_count * 4 * sections;
        if payload.len() != expected {
            return Err(FormatError::PayloadSize {
                path: p(),
                shape: [param_count, sections, 0],
                dtype: "f32".to_string(),
                expected,
                actual: payload.len(),
            });
        }

        let read_section = |section: usize| -> Vec<Tensor<f32>> {
            let base = section * param_count * 4;
            meta.manifest
                .iter()
                .map(|e| {
                    let n: usize = e.shape.iter().product();
                    let start = base + e.offset * 4;
                    let data: Vec<f32> = payload[start..start + n * 4]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(&e.shape, data)
                })
                .collect()
        };

        let params = ParameterSet::from_entries(
            meta.manifest
                .iter()
                .map(|e| e.name.clone())
                .zip(read_section(0))
                .collect(),
        );
        let adam = meta.has_adam.then(|| (read_section(1), read_section(2)));
        Ok(Self {
            model: meta.model,
            step: meta.step,
            seed: meta.seed,
            params,
            adam,
        })
    }
}
