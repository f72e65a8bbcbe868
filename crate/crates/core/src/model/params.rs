//! Named parameter tensors and the `RATTCKPT` checkpoint format.
//!
//! Layout of a checkpoint file (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "RATTCKPT"
//! version    u32      currently 1
//! config     u32 length + UTF-8 JSON of the ModelConfig
//! count      u32      number of tensors
//! per tensor:
//!   name     u32 length + UTF-8
//!   ndim     u32      (always 2)
//!   dims     ndim × u32
//!   values   rows·cols × f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RATTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

/// Flat, ordered list of parameter tensors. Parameter ids are positions in
/// this list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.tensors.push(NamedTensor {
            name: name.into(),
            value,
        });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Matrix {
        &self.tensors[id].value
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.tensors[id].value
    }

    pub fn name(&self, id: usize) -> &str {
        &self.tensors[id].name
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Same names and shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    value: Matrix::zeros(t.value.rows(), t.value.cols()),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.is_finite())
    }

    /// SHA-256 over names, shapes and exact `f64` bits, folded to 64 bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update((t.name.len() as u64).to_le_bytes());
            h.update(t.name.as_bytes());
            h.update((t.value.rows() as u64).to_le_bytes());
            h.update((t.value.cols() as u64).to_le_bytes());
            for v in t.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

/// Fills every tensor whose name is not a norm gain or the head logits with
/// `N(0, std²)` draws, in tensor order.
pub(crate) fn init_normal(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite positive std");
    for t in &mut store.tensors {
        if t.name.ends_with(".norm") || t.name == super::HEAD_LOGITS {
            continue;
        }
        for v in t.value.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamStore) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, config, params).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_checkpoint(
    w: &mut impl Write,
    config: &ModelConfig,
    params: &ParamStore,
) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let cfg = serde_json::to_vec(config).expect("config serializes");
    w.write_u32::<LittleEndian>(cfg.len() as u32)?;
    w.write_all(&cfg)?;
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for t in params.iter() {
        w.write_u32::<LittleEndian>(t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        w.write_u32::<LittleEndian>(2)?;
        w.write_u32::<LittleEndian>(t.value.rows() as u32)?;
        w.write_u32::<LittleEndian>(t.value.cols() as u32)?;
        for &v in t.value.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_checkpoint(&mut r).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn read_checkpoint(r: &mut impl Read) -> Result<(ModelConfig, ParamStore)> {
    let io = |e| Error::io("<checkpoint>", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a RATTCKPT checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg).map_err(io)?;
    let config: ModelConfig = serde_json::from_slice(&cfg)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = r.read_u32::<LittleEndian>().map_err(io)?;
        if ndim != 2 {
            return Err(Error::Format(format!("tensor {name}: expected 2 dims, got {ndim}")));
        }
        let rows = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut data = vec![0f32; rows * cols];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
        params.push(
            name,
            Matrix::from_vec(rows, cols, data.into_iter().map(f64::from).collect()),
        );
    }
    Ok((config, params))
}
