//! Versioned binary checkpoints: parameters, optimizer state, config echo, step.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "XCKP", version u16
//! step u64
//! config text: u32 byte length + UTF-8 `key = value` lines
//! parameter count u32, then per parameter:
//!     name (u32 length + UTF-8), rank u32, dims u32 × rank, values f64 × numel
//! optimizer flag u8; when 1:
//!     update count u64, beta1 f64, beta2 f64, eps f64, weight_decay f64,
//!     first moments then second moments, f64 × numel per parameter in order
//! ```
//!
//! Floats are stored bit-for-bit, so a reload reproduces forward passes exactly.

use std::path::Path;

use crate::config::{Preset, RunConfig};
use crate::data::ByteReader;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Data(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_len(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_values(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_str(r: &mut ByteReader<'_>) -> Result<String> {
    let n = r.usize32()?;
    let at = r.offset();
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format {
        offset: at,
        detail: "invalid UTF-8".into(),
    })
}

fn read_values(r: &mut ByteReader<'_>, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(r.f64()?);
    }
    Tensor::new(shape.to_vec(), data)
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.config.to_text())?;
        put_len(&mut out, self.params.len())?;
        for (name, t) in self.params.names().iter().zip(self.params.values()) {
            put_str(&mut out, name)?;
            put_len(&mut out, t.rank())?;
            for &d in t.shape() {
                put_len(&mut out, d)?;
            }
            put_values(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                let c = opt.config;
                for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for t in opt.first.iter().chain(&opt.second) {
                    put_values(&mut out, t);
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let step = r.u64()?;
        let config_at = r.offset();
        let text = read_str(&mut r)?;
        let config = RunConfig::from_text(Preset::Desk, &text).map_err(|e| Error::Format {
            offset: config_at,
            detail: format!("config echo: {e}"),
        })?;
        let count = r.usize32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let rank = r.usize32()?;
            let shape_at = r.offset();
            let shape = (0..rank).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
            if shape.contains(&0) {
                return Err(Error::Format {
                    offset: shape_at,
                    detail: format!("parameter {name} has a zero dimension"),
                });
            }
            let value = read_values(&mut r, &shape)?;
            params.add(name, value);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamWConfig {
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    weight_decay: r.f64()?,
                };
                let mut first = Vec::with_capacity(count);
                for t in params.values() {
                    first.push(read_values(&mut r, t.shape())?);
                }
                let mut second = Vec::with_capacity(count);
                for t in params.values() {
                    second.push(read_values(&mut r, t.shape())?);
                }
                Some(AdamW {
                    config,
                    step,
                    first,
                    second,
                })
            }
            f => return Err(r.fail(format!("bad optimizer flag {f}"))),
        };
        r.finish()?;
        Ok(Self {
            config,
            step,
            params,
            optimizer,
        })
    }

    /// Writes through a temporary sibling and renames, so an existing file at
    /// `path` is never left half-written.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.encode()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Copies parameters into `target`, which must have the same names and shapes.
    pub fn restore_into(&self, target: &mut ParamStore) -> Result<()> {
        if target.names() != self.params.names() {
            return Err(Error::Data("checkpoint parameters do not match the model layout".into()));
        }
        target.load_values(self.params.values().to_vec())
    }
}
