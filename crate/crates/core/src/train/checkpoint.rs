//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `FSTEP3D\0`, `u32` version, `u32` length and
//! UTF-8 text of the training config, `u64` epoch, `u32` array count, then per
//! array a `u32`-length-prefixed UTF-8 name, `u32` rank, `u64` extents and the
//! raw `f64` payload. Optimizer state is stored as extra arrays whose names
//! start with `momentum/`, `adam_m/`, `adam_v/` or `optimizer/`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::model::ModelParameters;

use super::config::TrainConfig;
use super::optimizer::OptimizerState;

pub const MAGIC: &[u8; 8] = b"FSTEP3D\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: u64,
    pub params: ModelParameters,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let mut arrays: Vec<(String, &Array)> = self.params.named_arrays();
        let names: Vec<String> = arrays.iter().map(|(n, _)| n.clone()).collect();
        let extra = self.optimizer.named_arrays(&names);
        arrays.extend(extra.iter().map(|(n, a)| (n.clone(), a)));
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, a) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
            for &e in a.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        if r.take(8)? != MAGIC {
            return Err(r.error("bad magic, not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(&format!("unsupported version {version} (expected {VERSION})")));
        }
        let text_len = r.u32()? as usize;
        let text = r.string(text_len)?;
        let config = TrainConfig::parse(&text, path)?;
        let epoch = r.u64()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| r.error("array extents overflow"))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| r.error("array extents overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push((name, Array::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes after the last array"));
        }
        let mut params = ModelParameters::zeros(config.model.clone())?;
        let param_count = params.named_arrays().len();
        if arrays.len() < param_count {
            return Err(r.error(&format!("{} arrays, model needs {param_count}", arrays.len())));
        }
        let optimizer_arrays = arrays.split_off(param_count);
        params.load_named(&arrays).map_err(|e| r.error(&e.to_string()))?;
        let names: Vec<String> = arrays.into_iter().map(|(n, _)| n).collect();
        let optimizer =
            OptimizerState::from_named(config.optimizer, &names, optimizer_arrays).map_err(|e| r.error(&e.to_string()))?;
        Ok(Self {
            config,
            epoch,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn error(&self, message: &str) -> Error {
        Error::Checkpoint {
            path: self.path.clone(),
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.error("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error("name is not valid UTF-8"))
    }
}
