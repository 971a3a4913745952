//! Binary checkpoint files.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    b"MVFTCKPT"
//! version  u32
//! header   u64 length + JSON (config, epoch, best accuracy, optimizer scalars, normalizer)
//! tensors  three sections (parameters, first moments, second moments), each
//!          u32 count then per tensor: u32 name length, name, u32 rank,
//!          u64 dims, f64 bit patterns
//! trailer  SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MvftError, Result};
use crate::model::MvftModel;
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use crate::views::ViewNormalizer;

pub const MAGIC: &[u8; 8] = b"MVFTCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub epoch: usize,
    pub best_acc: f64,
    /// Training-set view statistics, when the data was normalized.
    pub normalizer: Option<ViewNormalizer>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    best_acc: f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    normalizer: Option<ViewNormalizer>,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, model: &MvftModel, adam: AdamState, epoch: usize, best_acc: f64) -> Self {
        Checkpoint {
            config,
            params: model.params.clone(),
            adam,
            epoch,
            best_acc,
            normalizer: None,
        }
    }

    /// Rebuilds the model, checking that every parameter matches the
    /// architecture named by the config.
    pub fn model(&self) -> Result<MvftModel> {
        let mut model = MvftModel::new(self.config.model.clone(), self.config.kind, 0)?;
        if model.params.len() != self.params.len() {
            return Err(MvftError::contract(format!(
                "checkpoint holds {} parameters, architecture needs {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in self.params.iter() {
            let slot = model.params.get_mut(name)?;
            if slot.shape() != t.shape() {
                return Err(MvftError::shape("checkpoint", slot.shape(), t.shape()));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            best_acc: self.best_acc,
            lr: self.adam.lr,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            epsilon: self.adam.epsilon,
            step: self.adam.t,
            normalizer: self.normalizer.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        write_section(&mut out, self.params.iter());
        write_section(&mut out, self.adam.m.iter());
        write_section(&mut out, self.adam.v.iter());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(MvftError::Checksum(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(MvftError::Checksum("SHA-256 trailer does not match contents".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(MvftError::contract("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(MvftError::Version { found: version, expected: VERSION });
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;
        let mut params = ParamStore::new();
        for (name, t) in read_section(&mut r)? {
            params.insert(name, t);
        }
        let m = read_section(&mut r)?;
        let v = read_section(&mut r)?;
        if r.pos != body.len() {
            return Err(MvftError::contract("trailing bytes after tensor sections"));
        }
        Ok(Checkpoint {
            config: header.config,
            params,
            adam: AdamState {
                lr: header.lr,
                beta1: header.beta1,
                beta2: header.beta2,
                epsilon: header.epsilon,
                t: header.step,
                m,
                v,
            },
            epoch: header.epoch,
            best_acc: header.best_acc,
            normalizer: header.normalizer,
        })
    }
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn write_section<'a>(out: &mut Vec<u8>, tensors: impl Iterator<Item = (&'a String, &'a Tensor)>) {
    let tensors: Vec<_> = tensors.collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| MvftError::contract("checkpoint section runs past end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_section(r: &mut Reader<'_>) -> Result<BTreeMap<String, Tensor>> {
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| MvftError::contract("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let bytes = shape
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| MvftError::contract("tensor too large"))?;
        let raw = r.take(bytes)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}
