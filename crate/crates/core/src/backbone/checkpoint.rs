//! JSON checkpoints with base64 little-endian `f64` blobs and a SHA-256
//! content hash.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{Parameter, Tensor};
use crate::text::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab: Vocabulary,
    pub step: u64,
    pub sha256: String,
    pub params: Vec<ParamBlob>,
}

fn to_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(name: &str, bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("blob '{name}' is not a whole number of f64 values")));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn hash_params<'p>(h: &mut Sha256, params: impl IntoIterator<Item = (&'p str, &'p [usize], &'p [f64])>) {
    for (name, shape, data) in params {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((shape.len() as u64).to_le_bytes());
        for s in shape {
            h.update((*s as u64).to_le_bytes());
        }
        h.update(to_bytes(data));
    }
}

/// Content hash over parameter names, shapes and values.
pub fn params_digest<'p>(params: impl IntoIterator<Item = &'p Parameter>) -> String {
    let mut h = Sha256::new();
    hash_params(
        &mut h,
        params.into_iter().map(|p| (p.name.as_str(), p.shape(), p.tensor.data())),
    );
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn content_hash(kind: &str, config: &serde_json::Value, vocab: &Vocabulary, step: u64, tensors: &[(String, Tensor)]) -> String {
    let mut h = Sha256::new();
    h.update(format!("{FORMAT_VERSION}\n{kind}\n").as_bytes());
    h.update(config.to_string().as_bytes());
    for t in vocab.tokens() {
        h.update(b"\n");
        h.update(t.as_bytes());
    }
    h.update(step.to_le_bytes());
    hash_params(
        &mut h,
        tensors.iter().map(|(n, t)| (n.as_str(), t.shape(), t.data())),
    );
    hex(&h.finalize())
}

impl Checkpoint {
    pub fn from_params(
        kind: &str,
        config: &impl Serialize,
        vocab: &Vocabulary,
        step: u64,
        params: &[&Parameter],
    ) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let tensors: Vec<(String, Tensor)> = params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        let sha256 = content_hash(kind, &config, vocab, step, &tensors);
        Ok(Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            config,
            vocab: vocab.clone(),
            step,
            sha256,
            params: tensors
                .into_iter()
                .map(|(name, t)| ParamBlob {
                    name,
                    shape: t.shape().to_vec(),
                    data: STANDARD.encode(to_bytes(t.data())),
                })
                .collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    /// Reads a checkpoint and verifies its format version and hash.
    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = io::read_json(path)?;
        ck.verify()?;
        Ok(ck)
    }

    pub fn verify(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let actual = content_hash(&self.kind, &self.config, &self.vocab, self.step, &self.tensors()?);
        if actual != self.sha256 {
            return Err(Error::Checkpoint(format!(
                "hash mismatch: stored {}, computed {actual}",
                self.sha256
            )));
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a '{kind}' checkpoint, found '{}'", self.kind)));
        }
        Ok(())
    }

    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))
    }

    pub fn tensors(&self) -> Result<Vec<(String, Tensor)>> {
        self.params
            .iter()
            .map(|b| {
                let bytes = STANDARD
                    .decode(&b.data)
                    .map_err(|e| Error::Checkpoint(format!("blob '{}': {e}", b.name)))?;
                let data = from_bytes(&b.name, &bytes)?;
                if data.len() != b.shape.iter().product::<usize>() {
                    return Err(Error::Checkpoint(format!(
                        "blob '{}' holds {} values for shape {:?}",
                        b.name,
                        data.len(),
                        b.shape
                    )));
                }
                Ok((b.name.clone(), Tensor::new(b.shape.clone(), data)))
            })
            .collect()
    }

    /// Copies values into `params`, which must match the stored names and
    /// shapes exactly and in order.
    pub fn restore_into(&self, params: Vec<&mut Parameter>) -> Result<()> {
        let tensors = self.tensors()?;
        if tensors.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                params.len()
            )));
        }
        for (p, (name, t)) in params.into_iter().zip(tensors) {
            if p.name != name || p.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' {:?} does not match model tensor '{}' {:?}",
                    t.shape(),
                    p.name,
                    p.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
