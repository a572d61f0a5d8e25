//! Versioned binary checkpoint.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic          8 bytes   "LANTCKPT"
//! version        u32       FORMAT_VERSION
//! r              u32
//! use_attention  u8        0 or 1
//! epochs         u64
//! batch_size     u64
//! lr             f64
//! seed           u64
//! alpha          f64
//! beta           f64
//! flip_rate      f64
//! tensor count   u32
//! per tensor:    name length u16, name (UTF-8), rank u8, rank x u64 dims,
//!                prod(dims) x f64 values
//! ```
//!
//! Tensors appear in the canonical parameter order.

use std::fs;
use std::path::Path;

use super::loss::LossWeights;
use super::params::{ModelParams, TENSOR_NAMES};
use super::train::TrainConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LANTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let c = &ckpt.config;
    let mut out = Vec::with_capacity(64 + p.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.r as u32).to_le_bytes());
    out.push(u8::from(p.use_attention));
    out.extend_from_slice(&(c.epochs as u64).to_le_bytes());
    out.extend_from_slice(&(c.batch_size as u64).to_le_bytes());
    out.extend_from_slice(&c.lr.to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&c.loss_weights.alpha.to_le_bytes());
    out.extend_from_slice(&c.loss_weights.beta.to_le_bytes());
    out.extend_from_slice(&c.flip_rate.to_le_bytes());
    let named = p.named_tensors();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice of length N"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
}

/// Parse a checkpoint. With `expected_r`, a checkpoint built for another
/// patch size is rejected.
pub fn decode_checkpoint(bytes: &[u8], expected_r: Option<usize>) -> Result<Checkpoint> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = rd.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let r = rd.u32("patch size")? as usize;
    if let Some(want) = expected_r {
        if want != r {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with R = {r}, requested R = {want}"
            )));
        }
    }
    let use_attention = match rd.u8("attention flag")? {
        0 => false,
        1 => true,
        v => return Err(Error::Checkpoint(format!("bad attention flag {v}"))),
    };
    let config = TrainConfig {
        epochs: rd.u64("epochs")? as usize,
        batch_size: rd.u64("batch size")? as usize,
        lr: rd.f64("learning rate")?,
        seed: rd.u64("seed")?,
        loss_weights: LossWeights {
            alpha: rd.f64("alpha")?,
            beta: rd.f64("beta")?,
        },
        flip_rate: rd.f64("flip rate")?,
        use_attention,
    };

    let mut params = ModelParams::init(r, 0)
        .map_err(|e| Error::Checkpoint(format!("invalid patch size in checkpoint: {e}")))?;
    params.use_attention = use_attention;
    let count = rd.u32("tensor count")? as usize;
    if count != TENSOR_NAMES.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            TENSOR_NAMES.len()
        )));
    }
    for (name, t) in TENSOR_NAMES.iter().zip(params.tensors_mut()) {
        let len = rd.u16("tensor name length")? as usize;
        let got = rd.take(len, "tensor name")?;
        if got != name.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(got)
            )));
        }
        let rank = rd.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u64("tensor shape")? as usize);
        }
        if shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name} has shape {shape:?}, expected {:?}",
                t.shape()
            )));
        }
        for v in t.data_mut() {
            *v = rd.f64("tensor values")?;
        }
    }
    if rd.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - rd.pos
        )));
    }
    Ok(Checkpoint { params, config })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected_r: Option<usize>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?, expected_r)
}
