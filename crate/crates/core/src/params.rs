//! Flat parameter storage with named tensor views, the Adam optimizer, and
//! the named-tensor checkpoint format shared by the neural models.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! magic "TRJCKPT1"
//! u32 header length, header bytes (JSON)
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rank, rank x u64 dims, f64 payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// All parameters of a model in one contiguous buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    specs: Vec<TensorSpec>,
    data: Vec<f64>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            specs: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Appends a zero-filled tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.data.len(),
        };
        self.data.resize(self.data.len() + spec.numel(), 0.0);
        self.specs.push(spec);
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn tensor(&self, idx: usize) -> &[f64] {
        &self.data[self.specs[idx].range()]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut [f64] {
        let r = self.specs[idx].range();
        &mut self.data[r]
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name).map(|i| self.tensor(i))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.index_of(name).map(|i| self.tensor_mut(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Zero buffer with the same layout, for gradients.
    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub fn fill_uniform(&mut self, idx: usize, bound: f64, rng: &mut impl Rng) {
        for v in self.tensor_mut(idx) {
            *v = rng.random_range(-bound..=bound);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `name=l2norm` pairs for diagnostics.
    pub fn norms(&self) -> String {
        self.specs
            .iter()
            .map(|s| {
                let n = self.data[s.range()].iter().map(|v| v * v).sum::<f64>().sqrt();
                format!("{}={n:.3e}", s.name)
            })
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn save(&self, path: &Path, header: &impl Serialize) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        let header = serde_json::to_vec(header)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.specs.len() as u32).to_le_bytes())?;
        for s in &self.specs {
            w.write_all(&(s.name.len() as u32).to_le_bytes())?;
            w.write_all(s.name.as_bytes())?;
            w.write_all(&(s.shape.len() as u32).to_le_bytes())?;
            for d in &s.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in &self.data[s.range()] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint, returning the raw JSON header and the tensors.
    pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
        let fmt = |reason: &str| Error::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(fmt("bad magic"));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header: serde_json::Value = serde_json::from_slice(&header)?;
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| fmt("tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut word = [0u8; 8];
            for _ in 0..rank {
                r.read_exact(&mut word)?;
                shape.push(u64::from_le_bytes(word) as usize);
            }
            let idx = store.add(name, &shape);
            for v in store.tensor_mut(idx) {
                r.read_exact(&mut word)?;
                *v = f64::from_le_bytes(word);
            }
        }
        Ok((header, store))
    }

    /// Copies values from `other`, requiring an identical layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if self.specs != other.specs {
            return Err(Error::invalid("checkpoint tensor layout does not match the model"));
        }
        self.data.copy_from_slice(&other.data);
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 8] = b"TRJCKPT1";

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}
