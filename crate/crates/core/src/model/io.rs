//! Checkpoint byte layout (all little-endian):
//!
//! ```text
//! magic "PELTCKPT" | u32 version
//! u32 d | u32 layers | u32 heads | u32 ffn_mult | u32 max_len | u32 vocab_size
//! f64 ln_eps | u64 seed | u64 step | f64 loss
//! u32 tensor count, then per tensor:
//!   u32 name length | name bytes | u32 rank | u32 dims[rank] | f32 data
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Checkpoint, ModelConfig};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PELTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        for v in [c.d, c.layers, c.heads, c.ffn_mult, c.max_len, c.vocab_size] {
            w.len_u32(v)?;
        }
        w.f64(c.ln_eps);
        w.u64(c.seed);
        w.u64(self.step);
        w.f64(self.loss);
        w.len_u32(self.params.len())?;
        for (name, t) in self.params.iter() {
            w.str(name)?;
            w.len_u32(t.shape().len())?;
            for &d in t.shape() {
                w.len_u32(d)?;
            }
            for &x in t.data() {
                w.f32(x);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(8).map_err(|_| bad_magic())? != CHECKPOINT_MAGIC {
            return Err(bad_magic());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            d: dims[0],
            layers: dims[1],
            heads: dims[2],
            ffn_mult: dims[3],
            max_len: dims[4],
            vocab_size: dims[5],
            ln_eps: r.f64()?,
            seed: r.u64()?,
        };
        let step = r.u64()?;
        let loss = r.f64()?;
        config.validate()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` has an absurd shape")))?;
            let data = r.f32s(n)?;
            params
                .insert(name, Tensor::new(shape, data)?)
                .map_err(|e| Error::Corrupt(e.to_string()))?;
        }
        r.finish()?;
        check_layout(&config, &params)?;
        Ok(Self {
            config,
            params,
            step,
            loss,
        })
    }

    /// SHA-256 of the serialised checkpoint.
    pub fn fingerprint(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_bytes()?).into())
    }
}

fn bad_magic() -> Error {
    Error::Format("not a checkpoint (bad magic)".into())
}

/// The stored tensors must be exactly those a fresh model of `config` has.
fn check_layout(config: &ModelConfig, params: &ParamStore<f32>) -> Result<()> {
    let reference = Checkpoint::<f32>::init(config.clone())?;
    let want: Vec<(&str, &[usize])> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
    let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
    if want != got {
        return Err(Error::Format(
            "checkpoint tensors do not match its configuration".into(),
        ));
    }
    Ok(())
}

pub fn fingerprint_hex(fp: &[u8; 32]) -> String {
    fp.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
