//! Checkpoint files.
//!
//! Layout: the 8 magic bytes `FSEGCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! raw little-endian `f64` payload. The header lists every tensor with its
//! shape and offset (in values) into the payload. Base weights, adapters
//! (`lora.` prefix) and optimizer moments (`adam.m/`, `adam.v/`) share the
//! payload but are separated by name, so each group can be read on its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamW;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Mat;

pub const MAGIC: &[u8; 8] = b"FSEGCKPT";
pub const VERSION: u32 = 1;
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub step: u64,
    pub optimizer_step: u64,
    pub corpus_digest: String,
    pub vocab_digest: String,
    /// Vocabulary in its JSON form, so a checkpoint is self-contained.
    pub vocab: String,
    pub payload_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub corpus_digest: String,
    pub vocab_json: String,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, m: &Mat| {
            tensors.push(TensorEntry {
                name,
                rows: m.nrows(),
                cols: m.ncols(),
                offset,
            });
            for v in m.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += m.len();
        };
        for (name, m) in self.params.iter() {
            push(name.to_string(), m);
        }
        for (name, m) in &self.optimizer.m {
            push(format!("{MOMENT1}{name}"), m);
        }
        for (name, m) in &self.optimizer.v {
            push(format!("{MOMENT2}{name}"), m);
        }
        let vocab = crate::text::Vocabulary::from_json(&self.vocab_json)?;
        let header = CheckpointHeader {
            config: self.config.clone(),
            step: self.step,
            optimizer_step: self.optimizer.t,
            corpus_digest: self.corpus_digest.clone(),
            vocab_digest: vocab.digest(),
            vocab: self.vocab_json.clone(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("payload hash mismatch"));
        }
        let mut params = ParamStore::new();
        let mut optimizer = AdamW::new(header.config.learning_rate, header.config.weight_decay);
        optimizer.t = header.optimizer_step;
        for t in &header.tensors {
            let start = t.offset * 8;
            let end = start + t.rows * t.cols * 8;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` runs past the payload", t.name)));
            }
            let vals: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Mat::from_shape_vec((t.rows, t.cols), vals).expect("shape from header");
            if let Some(n) = t.name.strip_prefix(MOMENT1) {
                optimizer.m.insert(n.to_string(), m);
            } else if let Some(n) = t.name.strip_prefix(MOMENT2) {
                optimizer.v.insert(n.to_string(), m);
            } else {
                params.insert(t.name.clone(), m);
            }
        }
        let vocab = crate::text::Vocabulary::from_json(&header.vocab)?;
        if vocab.digest() != header.vocab_digest {
            return Err(bad("vocabulary hash mismatch"));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            corpus_digest: header.corpus_digest,
            vocab_json: header.vocab,
            params,
            optimizer,
        })
    }
}

/// Tensors whose names start with `prefix`, e.g. only the adapters.
pub fn load_group(path: &Path, prefix: &str) -> Result<BTreeMap<String, Mat>> {
    let ck = Checkpoint::load(path)?;
    Ok(ck
        .params
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, m)| (n.to_string(), m.clone()))
        .collect())
}
