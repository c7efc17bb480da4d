//! Binary checkpoint container: `FPFNCKPT`, a little-endian `u32` format
//! version, a `u64` header length, the JSON header, then every tensor as
//! little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::AdamState;
use super::{param_layout, FairPfn, ModelConfig};
use crate::error::{ForgeError, Result};
use crate::scm_prior::PriorConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FPFNCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub format_version: u32,
    pub steps_completed: usize,
    pub datasets_seen: u64,
    pub skipped_steps: usize,
    pub final_loss: Option<f64>,
    /// SHA-256 of the prior configuration's JSON form.
    pub prior_config_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub prior_config: PriorConfig,
    pub params: Vec<Array2<f32>>,
    pub adam: AdamState,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    prior_config: PriorConfig,
    provenance: Provenance,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

pub fn prior_digest(prior: &PriorConfig) -> String {
    let json = serde_json::to_vec(prior).expect("prior config serializes");
    hex::encode(Sha256::digest(json))
}

impl ModelCheckpoint {
    pub fn fresh(model: FairPfn, prior_config: PriorConfig) -> Self {
        let adam = AdamState::zeros_like(&model.params);
        ModelCheckpoint {
            provenance: Provenance {
                format_version: CHECKPOINT_VERSION,
                steps_completed: 0,
                datasets_seen: 0,
                skipped_steps: 0,
                final_loss: None,
                prior_config_digest: prior_digest(&prior_config),
            },
            config: model.config,
            prior_config,
            params: model.params,
            adam,
        }
    }

    pub fn model(&self) -> FairPfn {
        FairPfn { config: self.config.clone(), params: self.params.clone() }
    }

    fn tensors(&self) -> Vec<(String, &Array2<f32>)> {
        let layout = param_layout(&self.config);
        let mut out = Vec::with_capacity(layout.len() * 3);
        for (i, (name, _)) in layout.iter().enumerate() {
            out.push((name.clone(), &self.params[i]));
        }
        for (i, (name, _)) in layout.iter().enumerate() {
            out.push((format!("adam.m.{name}"), &self.adam.m[i]));
        }
        for (i, (name, _)) in layout.iter().enumerate() {
            out.push((format!("adam.v.{name}"), &self.adam.v[i]));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let header = Header {
            config: self.config.clone(),
            prior_config: self.prior_config.clone(),
            provenance: self.provenance.clone(),
            adam_step: self.adam.t,
            tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: [t.nrows(), t.ncols()] }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20 + tensors.iter().map(|(_, t)| t.len() * 4).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |expected: usize| {
            if bytes.len() < expected {
                Err(ForgeError::Truncated { expected, found: bytes.len() })
            } else {
                Ok(())
            }
        };
        need(20)?;
        if &bytes[..8] != MAGIC {
            return Err(ForgeError::Format("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ForgeError::UnknownVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize.checked_add(header_len).ok_or_else(|| ForgeError::Format("header length overflows".into()))?;
        need(data_start)?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start])
            .map_err(|e| ForgeError::Format(format!("bad checkpoint header: {e}")))?;
        header.config.validate()?;

        let layout = param_layout(&header.config);
        let mut expected_names = Vec::with_capacity(layout.len() * 3);
        for prefix in ["", "adam.m.", "adam.v."] {
            for (name, shape) in &layout {
                expected_names.push((format!("{prefix}{name}"), *shape));
            }
        }
        if header.tensors.len() != expected_names.len() {
            return Err(ForgeError::Format(format!(
                "expected {} tensors, header lists {}",
                expected_names.len(),
                header.tensors.len()
            )));
        }
        for (entry, (name, shape)) in header.tensors.iter().zip(&expected_names) {
            if &entry.name != name || &entry.shape != shape {
                return Err(ForgeError::Format(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
        }
        let floats: usize = header.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
        let total = data_start + floats * 4;
        need(total)?;
        if bytes.len() != total {
            return Err(ForgeError::Format(format!("{} trailing bytes after tensor data", bytes.len() - total)));
        }
        let mut offset = data_start;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let [r, c] = entry.shape;
            let values: Vec<f32> = bytes[offset..offset + r * c * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            offset += r * c * 4;
            tensors.push(Array2::from_shape_vec((r, c), values).expect("shape checked"));
        }
        let k = layout.len();
        let v = tensors.split_off(2 * k);
        let m = tensors.split_off(k);
        Ok(ModelCheckpoint {
            config: header.config,
            prior_config: header.prior_config,
            params: tensors,
            adam: AdamState { m, v, t: header.adam_step },
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
