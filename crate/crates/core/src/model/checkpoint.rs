//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `VSTGCKPT`, a little-endian `u64` header length,
//! a JSON header (format tag, model config, counters, RNG state and an index
//! of arrays), then every array's `f64` values little-endian in index order.
//! Values are stored bit-exactly, so a reloaded model reproduces forward
//! outputs bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HamModel, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "voipsteg-checkpoint/1";
const MAGIC: &[u8; 8] = b"VSTGCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_array(name: impl Into<String>, a: &Array2<f64>) -> Self {
        NamedArray {
            name: name.into(),
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    fn from_vector(name: impl Into<String>, v: &Array1<f64>) -> Self {
        NamedArray {
            name: name.into(),
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .expect("shape matches data")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint("corrupt RNG state".into());
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad())?
            .try_into()
            .map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Weights, buffers, optimizer state and RNG state of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub weights: Vec<NamedArray>,
    pub optimizer: Vec<NamedArray>,
    pub rng: RngState,
    /// Free-form provenance (training config, dataset paths, ...).
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelConfig,
    step: u64,
    rng: RngState,
    meta: BTreeMap<String, String>,
    weights: Vec<ArrayEntry>,
    optimizer: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

fn index(arrays: &[NamedArray]) -> Vec<ArrayEntry> {
    arrays
        .iter()
        .map(|a| ArrayEntry {
            name: a.name.clone(),
            rows: a.rows,
            cols: a.cols,
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: CHECKPOINT_FORMAT.to_string(),
            model: self.model.clone(),
            step: self.step,
            rng: self.rng.clone(),
            meta: self.meta.clone(),
            weights: index(&self.weights),
            optimizer: index(&self.optimizer),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in self.weights.iter().chain(&self.optimizer) {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format {:?}",
                header.format
            )));
        }
        let mut cursor = 16 + len;
        let mut read = |entries: Vec<ArrayEntry>| -> Result<Vec<NamedArray>> {
            entries
                .into_iter()
                .map(|e| {
                    let n = e.rows * e.cols;
                    let raw = bytes
                        .get(cursor..cursor + 8 * n)
                        .ok_or_else(|| bad("truncated array data"))?;
                    cursor += 8 * n;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Ok(NamedArray {
                        name: e.name,
                        rows: e.rows,
                        cols: e.cols,
                        data,
                    })
                })
                .collect()
        };
        let weights = read(header.weights)?;
        let optimizer = read(header.optimizer)?;
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after array data"));
        }
        Ok(Checkpoint {
            model: header.model,
            step: header.step,
            weights,
            optimizer,
            rng: header.rng,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::open(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::open(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn model(&self) -> Result<HamModel> {
        HamModel::from_checkpoint(self)
    }
}

impl HamModel {
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut weights: Vec<NamedArray> = self
            .params()
            .into_iter()
            .map(|p| NamedArray::from_array(&p.name, &p.value))
            .collect();
        weights.push(NamedArray::from_vector(
            "batchnorm.running_mean",
            &self.norm.running_mean,
        ));
        weights.push(NamedArray::from_vector(
            "batchnorm.running_var",
            &self.norm.running_var,
        ));
        Checkpoint {
            model: self.config.clone(),
            step,
            weights,
            optimizer: Vec::new(),
            rng: RngState::capture(&self.rng),
            meta: BTreeMap::new(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = HamModel::new(ckpt.model.clone(), 0)?;
        let mut by_name: BTreeMap<&str, &NamedArray> =
            ckpt.weights.iter().map(|a| (a.name.as_str(), a)).collect();
        let mut take = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
            let a = by_name
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            if (a.rows, a.cols) != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {}x{} where {rows}x{cols} expected",
                    a.rows, a.cols
                )));
            }
            Ok(a.to_array())
        };
        for p in model.params_mut() {
            let (r, c) = p.value.dim();
            p.value = take(&p.name, r, c)?;
        }
        let dim = model.model_dim();
        model.norm.running_mean = take("batchnorm.running_mean", 1, dim)?.row(0).to_owned();
        model.norm.running_var = take("batchnorm.running_var", 1, dim)?.row(0).to_owned();
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected array {extra}")));
        }
        model.rng = ckpt.rng.restore()?;
        Ok(model)
    }
}
