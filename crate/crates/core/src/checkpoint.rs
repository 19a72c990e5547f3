//! Versioned, checksummed binary checkpoints.
//!
//! Layout: `MAGIC | version: u32 | header_len: u64 | header (JSON) | tensor
//! data (f32, little endian, in header order) | SHA-256 of all prior bytes`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pdac_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PDACCKPT";
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = MAGIC.len() + 4 + 8;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Which stage produced the tensors, e.g. `"slice"`, `"seg"`, `"cls"`.
    pub stage: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub params: ParamStore,
    /// Named sub-states, mapped to the tensor-name prefix (without the trailing
    /// dot) that delimits them.
    pub subtrees: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: String,
    seed: u64,
    config: serde_json::Value,
    subtrees: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, seed: u64, config: serde_json::Value, params: ParamStore) -> Self {
        Self {
            stage: stage.into(),
            seed,
            config,
            params,
            subtrees: BTreeMap::new(),
        }
    }

    pub fn with_subtree(mut self, name: impl Into<String>, prefix: impl Into<String>) -> Self {
        self.subtrees.insert(name.into(), prefix.into());
        self
    }

    /// Tensors of a named sub-state, keeping their full names.
    pub fn subtree(&self, name: &str) -> Option<ParamStore> {
        self.subtrees.get(name).map(|prefix| self.params.subtree(prefix))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            stage: self.stage.clone(),
            seed: self.seed,
            config: self.config.clone(),
            subtrees: self.subtrees.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + 4 * self.params.num_scalars() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN + DIGEST_LEN {
            return Err(Error::Integrity(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Integrity("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[PREFIX_LEN..header_end])?;
        let mut data = &body[header_end..];
        let mut params = ParamStore::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < 4 * n {
                return Err(Error::Integrity(format!("tensor `{}` truncated", entry.name)));
            }
            let (chunk, rest) = data.split_at(4 * n);
            let values = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            params.insert(entry.name, Tensor::new(entry.shape, values));
            data = rest;
        }
        if !data.is_empty() {
            return Err(Error::Integrity(format!("{} trailing bytes", data.len())));
        }
        Ok(Self {
            stage: header.stage,
            seed: header.seed,
            config: header.config,
            params,
            subtrees: header.subtrees,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pdac_nn::{seeded_rng, Init};

    fn sample() -> Checkpoint {
        let mut rng = seeded_rng(3);
        let mut params = ParamStore::new();
        params.init("encoder.0.w", &[4, 1, 3, 3, 3], Init::HeNormal { fan_in: 27 }, &mut rng);
        params.init("encoder.0.b", &[4], Init::Uniform { bound: 0.5 }, &mut rng);
        params.init("decoder.head.w", &[3, 4, 1, 1, 1], Init::Uniform { bound: 1.0 }, &mut rng);
        params.insert("odd", Tensor::new(vec![3], vec![f32::MIN_POSITIVE, -0.0, 1e-40]));
        Checkpoint::new("seg", 11, serde_json::json!({"lr": 0.001}), params).with_subtree("encoder", "encoder")
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(back.params.bit_eq(&ck.params));
        assert_eq!(back.config, ck.config);
        assert_eq!((back.stage.as_str(), back.seed), ("seg", 11));
        let enc = back.subtree("encoder").unwrap();
        assert_eq!(enc.names().collect::<Vec<_>>(), ["encoder.0.b", "encoder.0.w"]);
        assert!(back.subtree("missing").is_none());
    }

    #[test]
    fn truncation_and_corruption_are_integrity_errors() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 40;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        let n = bytes.len() - DIGEST_LEN;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 99, expected: CHECKPOINT_VERSION })
        ));
    }
}
