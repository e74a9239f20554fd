//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "IRNETCKP" | version u32 | element bytes u8 | config (u32 len + utf8)
//! | step u64 | tensor count u32
//! | per tensor: name (u32 len + utf8) | rank u32 | dims u64 x rank | data
//! | optimizer flag u8 [| adam step u64 | lr, beta1, beta2, eps f64 | per tensor: m, v]
//! ```

use std::path::Path;

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Module};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"IRNETCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Option<Adam<T>>,
    pub step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_values<T: Real>(out: &mut Vec<u8>, v: &[T]) {
    for &x in v {
        x.to_le_bytes_vec(out);
    }
}

pub fn checkpoint_to_bytes<T: Real>(model: &Model<T>, optimizer: Option<&Adam<T>>, step: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(T::BYTES as u8);
    put_str(&mut out, &model.config.to_text());
    out.extend_from_slice(&step.to_le_bytes());
    let mut count = 0u32;
    model.visit_params("", &mut |_, _| count += 1);
    put_u32(&mut out, count);
    model.visit_params("", &mut |name, t| {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_values(&mut out, t.data());
    });
    match optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step.to_le_bytes());
            for v in [opt.config.lr, opt.config.beta1, opt.config.beta2, opt.config.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let mut i = 0;
            model.visit_params("", &mut |_, t| {
                let zeros = vec![T::zero(); t.len()];
                put_values(&mut out, opt.first.get(i).unwrap_or(&zeros));
                put_values(&mut out, opt.second.get(i).unwrap_or(&zeros));
                i += 1;
            });
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint {
            offset: at,
            msg: format!("{what} is not valid utf-8"),
        })
    }
    fn values<T: Real>(&mut self, n: usize, elem: usize, what: &str) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(elem).ok_or_else(|| self.fail("size overflow"))?, what)?;
        Ok(raw
            .chunks_exact(elem)
            .map(|c| match elem {
                4 => T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                _ => T::from_f64(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect())
    }
}

/// Parses a checkpoint. Values stored at the other precision are converted.
pub fn checkpoint_from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            msg: "bad magic, not a checkpoint file".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let at = r.pos;
    let elem = r.u8("element size")? as usize;
    if elem != 4 && elem != 8 {
        return Err(Error::Checkpoint {
            offset: at,
            msg: format!("element size {elem} is neither 4 nor 8"),
        });
    }
    let at = r.pos;
    let config = ModelConfig::from_text(&r.string("config")?).map_err(|e| Error::Checkpoint {
        offset: at,
        msg: format!("embedded config: {e}"),
    })?;
    let step = r.u64("step")?;
    let mut model = Model::<T>::new(&config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = {
        let mut v = Vec::new();
        model.visit_params("", &mut |n, t| v.push((n.to_string(), t.shape().to_vec())));
        v
    };
    let at = r.pos;
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint {
            offset: at,
            msg: format!("{count} tensors stored, config implies {}", expected.len()),
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let at = r.pos;
        let stored = r.string("tensor name")?;
        if &stored != name {
            return Err(Error::Checkpoint {
                offset: at,
                msg: format!("expected tensor {name:?}, found {stored:?}"),
            });
        }
        let at = r.pos;
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Checkpoint {
                offset: at,
                msg: format!("tensor {name} has shape {dims:?}, expected {shape:?}"),
            });
        }
        let len = shape.iter().product();
        tensors.push(Tensor::from_vec(shape, r.values(len, elem, name)?)?);
    }
    let mut it = tensors.into_iter();
    model.visit_params_mut("", &mut |_, t| *t = it.next().unwrap());

    let at = r.pos;
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let config = AdamConfig {
                lr: r.f64("lr")?,
                beta1: r.f64("beta1")?,
                beta2: r.f64("beta2")?,
                eps: r.f64("eps")?,
            };
            let mut opt = Adam::new(config);
            opt.step = step;
            for (name, shape) in &expected {
                let len = shape.iter().product();
                opt.first.push(r.values(len, elem, name)?);
                opt.second.push(r.values(len, elem, name)?);
            }
            Some(opt)
        }
        f => {
            return Err(Error::Checkpoint {
                offset: at,
                msg: format!("optimizer flag {f} is neither 0 nor 1"),
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { model, optimizer, step })
}

pub fn save_checkpoint<T: Real>(
    model: &Model<T>,
    optimizer: Option<&Adam<T>>,
    step: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_to_bytes(model, optimizer, step)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
