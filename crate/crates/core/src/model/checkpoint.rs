//! Binary checkpoint container: magic, format version, a JSON header with
//! the config and tensor shapes, then every tensor as little-endian f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::Params;
use super::transformer::ToyTransformer;
use crate::error::{LaknError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LAKNCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl ToyTransformer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let names = self.params.names();
        let tensors = self.params.tensors();
        let header = Header {
            config: self.config.clone(),
            tensors: names
                .into_iter()
                .zip(&tensors)
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.n_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| LaknError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(LaknError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut params = Params::init(&ModelConfig {
            seed: 0,
            ..header.config.clone()
        });
        let names = params.names();
        if header.tensors.len() != names.len() {
            return Err(bad("tensor count does not match config"));
        }
        let mut off = 20 + hlen;
        for ((entry, name), t) in header.tensors.iter().zip(&names).zip(params.tensors_mut()) {
            if &entry.name != name || entry.shape != t.shape() {
                return Err(LaknError::Checkpoint(format!(
                    "tensor {} {:?} where {name} {:?} expected",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            let n = t.numel();
            let raw = bytes.get(off..off + 8 * n).ok_or_else(|| bad("truncated payload"))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            *t = Tensor::new(entry.shape.clone(), data)?;
            off += 8 * n;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        ToyTransformer::from_params(header.config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| LaknError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| LaknError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the checkpoint bytes.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
