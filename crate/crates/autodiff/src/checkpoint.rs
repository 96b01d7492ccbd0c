//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "LSACKPT\0"
//! version  u32
//! mlen     u64      length of the manifest in bytes
//! manifest mlen     compact UTF-8 JSON: {"params":[{"name":..,"shape":[..]},..],"meta":{..}}
//! payload           f64 values of every parameter, in manifest order
//! ```
//!
//! The manifest must be in canonical form (exactly what `to_bytes` writes),
//! which makes decode followed by encode byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub params: Vec<(String, Tensor)>,
    /// Free-form metadata (vocabulary, model configuration, ...).
    pub meta: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet, meta: serde_json::Value) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            params: params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            meta,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored values into `params`; names and shapes must match exactly.
    pub fn restore_into(&self, params: &mut ParamSet) -> Result<()> {
        if self.params.len() != params.len() {
            return Err(corrupt(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                params.len()
            )));
        }
        for (name, value) in &self.params {
            let id = params
                .find(name)
                .ok_or_else(|| corrupt(format!("unknown parameter `{name}`")))?;
            params.set_value(id, value.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            params: self
                .params
                .iter()
                .map(|(name, t)| ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let payload: usize = self.params.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing checkpoint header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes
            .get(20..20 + mlen)
            .ok_or_else(|| corrupt("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest: {e}")))?;
        if serde_json::to_vec(&manifest).expect("manifest serializes") != json {
            return Err(corrupt("manifest is not in canonical form"));
        }

        let mut offset = 20 + mlen;
        let mut params = Vec::with_capacity(manifest.params.len());
        for entry in manifest.params {
            let numel: usize = entry.shape.iter().product();
            let end = offset + numel * 8;
            let raw = bytes
                .get(offset..end)
                .ok_or_else(|| corrupt(format!("truncated payload for `{}`", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((entry.name, Tensor::new(entry.shape, data)?));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(corrupt(format!(
                "{} trailing bytes after payload",
                bytes.len() - offset
            )));
        }
        Ok(Checkpoint {
            version,
            params,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.add("w", Tensor::matrix(2, 2, vec![1.0, -0.5, 3.25, 1e-300]).unwrap(), 0);
        params.add("eta_l", Tensor::scalar(1.0), 1);
        Checkpoint::from_params(&params, serde_json::json!({"vocab": ["[PAD]", "a"], "d": 2}))
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let bytes = sample().to_bytes();
        let decoded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(decoded, sample());
        assert_eq!(decoded.to_bytes(), bytes);
    }

    #[test]
    fn header_fields() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn rejects_non_canonical_manifest() {
        let ckpt = sample();
        let mut bytes = ckpt.to_bytes();
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        // Replace the manifest with a pretty-printed equivalent.
        let json: serde_json::Value = serde_json::from_slice(&bytes[20..20 + mlen]).unwrap();
        let pretty = serde_json::to_vec_pretty(&json).unwrap();
        let payload = bytes.split_off(20 + mlen);
        bytes.truncate(12);
        bytes.extend_from_slice(&(pretty.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&pretty);
        bytes.extend_from_slice(&payload);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let ckpt = sample();
        let mut params = ParamSet::new();
        params.add("w", Tensor::zeros(&[2, 2]), 0);
        params.add("eta_l", Tensor::scalar(0.0), 1);
        ckpt.restore_into(&mut params).unwrap();
        assert_eq!(params.value(params.find("eta_l").unwrap()).data(), &[1.0]);

        let mut wrong = ParamSet::new();
        wrong.add("w", Tensor::zeros(&[4]), 0);
        wrong.add("eta_l", Tensor::scalar(0.0), 1);
        assert!(ckpt.restore_into(&mut wrong).is_err());
    }
}
