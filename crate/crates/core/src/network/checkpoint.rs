//! `.pdtc` checkpoint files.
//!
//! Layout: magic `PDTC`, a `u32` little-endian header length, the JSON
//! header, then every tensor as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params, PoreDiT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PDTC";
const FORMAT_VERSION: u32 = 1;

/// Porosity normalisation statistics of the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondStats {
    pub phi_mean: f64,
    pub phi_std: f64,
}

impl Default for CondStats {
    fn default() -> Self {
        Self {
            phi_mean: 0.0,
            phi_std: 1.0,
        }
    }
}

impl CondStats {
    /// Statistics of a porosity sample; a degenerate spread maps to 1.
    pub fn from_samples(phis: &[f64]) -> Self {
        let n = phis.len().max(1) as f64;
        let mean = phis.iter().sum::<f64>() / n;
        let var = phis.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            phi_mean: mean,
            phi_std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn normalize(&self, phi: f64) -> f64 {
        (phi - self.phi_mean) / self.phi_std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub cond_stats: CondStats,
    pub diffusion_steps: usize,
    pub s_offset: f64,
    /// Lags of the S2 condition features, empty when the branch is off.
    pub s2_lags: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PoreDiT,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<ManifestEntry>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let mut offset = 0;
        let tensors = params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            config: self.model.config().clone(),
            meta: self.meta.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in params.tensors() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated(format!("checkpoint of {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                expected: "PDTC".into(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| Error::Truncated(format!("header needs {hlen} bytes")))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(header.format_version));
        }
        let payload = &bytes[8 + hlen..];
        let mut names = Vec::with_capacity(header.tensors.len());
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_end = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| Error::Truncated(format!("tensor {} runs past the payload", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            names.push(e.name.clone());
            tensors.push(Tensor::new(e.shape.clone(), data).map_err(|err| Error::Checkpoint(err.to_string()))?);
            expected_end = expected_end.max(e.offset + 4 * n);
        }
        if payload.len() > expected_end {
            return Err(Error::TrailingData(payload.len() - expected_end));
        }
        let params = Params { names, tensors };
        let model = PoreDiT::from_params(header.config, params)?;
        Ok(Self {
            model,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
