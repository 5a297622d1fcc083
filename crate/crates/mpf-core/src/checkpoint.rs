//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MPFN" | u32 version | u32 spec_len | spec text (architecture file)
//! u32 epoch | u8 precision (0 single, 1 double)
//! [u8; 32] rng seed | u128 rng word position
//! u32 param count | param records
//! u32 momentum buffer count | buffer records
//! ```
//!
//! Each record is `u32 name_len | name | u8 dtype (0 f32, 1 f64) |
//! u32 x 4 shape (batch, channels, height, width) | raw values`. Values are
//! written as f32 when the tensor is single precision (its values are
//! f32-representable by construction), so save/load round-trips bit-exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MPFN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch_source: String,
    /// Epochs completed when this checkpoint was written.
    pub epoch: u32,
    pub precision: Precision,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    /// Parameter values in registration order.
    pub params: Vec<(String, Tensor)>,
    /// Optimizer momentum buffers, matching parameter names.
    pub momentum: Vec<(String, Tensor)>,
}

fn push_record(out: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let s = tensor.shape();
    match tensor.precision() {
        Precision::Single => out.push(0),
        Precision::Double => out.push(1),
    }
    for dim in [s.batch, s.channels, s.height, s.width] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    match tensor.precision() {
        Precision::Single => {
            for v in tensor.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Precision::Double => {
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, format!("truncated while reading {what}")));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32("record name length")? as usize;
        let name = String::from_utf8(self.take(name_len, "record name")?.to_vec())
            .map_err(|_| Error::format(self.path, "record name is not utf-8"))?;
        let precision = match self.u8("record dtype")? {
            0 => Precision::Single,
            1 => Precision::Double,
            other => {
                return Err(Error::format(self.path, format!("unknown dtype {other}")));
            }
        };
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u32("record shape")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
        let numel = shape.numel();
        let data = match precision {
            Precision::Single => {
                let raw = self.take(4 * numel, "record values")?;
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            Precision::Double => {
                let raw = self.take(8 * numel, "record values")?;
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
        };
        let tensor = Tensor::from_vec(shape, precision, data)?;
        Ok((name, tensor))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arch_source.len() as u32).to_le_bytes());
        out.extend_from_slice(self.arch_source.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.push(match self.precision {
            Precision::Single => 0,
            Precision::Double => 1,
        });
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            push_record(&mut out, name, tensor);
        }
        out.extend_from_slice(&(self.momentum.len() as u32).to_le_bytes());
        for (name, tensor) in &self.momentum {
            push_record(&mut out, name, tensor);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(path, format!("bad magic {magic:?}, not a checkpoint")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let spec_len = r.u32("spec length")? as usize;
        let arch_source = String::from_utf8(r.take(spec_len, "spec text")?.to_vec())
            .map_err(|_| Error::format(path, "spec text is not utf-8"))?;
        let epoch = r.u32("epoch")?;
        let precision = match r.u8("precision")? {
            0 => Precision::Single,
            1 => Precision::Double,
            other => return Err(Error::format(path, format!("unknown precision {other}"))),
        };
        let rng_seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
        let rng_word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
        let param_count = r.u32("param count")? as usize;
        let mut params = Vec::with_capacity(param_count);
        for _ in 0..param_count {
            params.push(r.record()?);
        }
        let buf_count = r.u32("momentum count")? as usize;
        let mut momentum = Vec::with_capacity(buf_count);
        for _ in 0..buf_count {
            momentum.push(r.record()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { arch_source, epoch, precision, rng_seed, rng_word_pos, params, momentum })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
