//! Named-tensor checkpoint container.
//!
//! Layout (little-endian): magic `SELDCKPT`, `u32` version, `u32` length +
//! UTF-8 model config (`key=value` lines), `u32` tensor count, then per
//! tensor: `u32` name length, name, `u32` rank, `u32` dims, `f32` values.
//! Names follow the module tree, e.g. `block0.bimamba.fwd.in_proj.weight`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SeldError};
use crate::model::{ModelConfig, SeldModel};
use crate::nn::Module;
use crate::num::Real;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SELDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Config text plus tensors ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: BTreeMap<String, NamedTensor>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| SeldError::invalid("checkpoint: value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_string(r: &mut impl Read, what: &str) -> Result<String> {
    let n = get_u32(r)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| SeldError::invalid(format!("checkpoint: {what} is not UTF-8")))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION as usize)?;
        put_u32(w, self.config.len())?;
        w.write_all(self.config.as_bytes())?;
        put_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            put_u32(w, t.shape.len())?;
            for &d in &t.shape {
                put_u32(w, d)?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(SeldError::invalid("checkpoint: bad magic"));
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(SeldError::invalid(format!("checkpoint: unsupported version {version}")));
        }
        let config = get_string(r, "config")?;
        let n = get_u32(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name = get_string(r, "tensor name")?;
            let rank = get_u32(r)?;
            let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(name, NamedTensor { shape, data });
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Snapshot every parameter and buffer of a model.
    pub fn from_model<T: Real>(model: &mut SeldModel<T>) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit("", &mut |name, p| {
            tensors.insert(
                name.to_string(),
                NamedTensor {
                    shape: p.shape.clone(),
                    data: p.value.iter().map(|v| v.f64() as f32).collect(),
                },
            );
        });
        Checkpoint {
            config: model.config.to_kv(),
            tensors,
        }
    }

    /// Copy tensors into a model by name. Every model tensor must be present
    /// with a matching shape; unknown names in the checkpoint are errors.
    pub fn load_into<T: Real>(&self, model: &mut SeldModel<T>) -> Result<()> {
        let mut seen = 0;
        let mut err = None;
        model.visit("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                Some(t) if t.shape == p.shape => {
                    p.value.iter_mut().zip(&t.data).for_each(|(v, &x)| *v = T::of(x as f64));
                    seen += 1;
                }
                Some(t) => {
                    err = Some(SeldError::shape(format!(
                        "checkpoint: {name} has shape {:?}, model expects {:?}",
                        t.shape, p.shape
                    )))
                }
                None => err = Some(SeldError::invalid(format!("checkpoint: missing tensor {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.tensors.len() {
            return Err(SeldError::invalid(format!(
                "checkpoint: {} tensors not used by the model",
                self.tensors.len() - seen
            )));
        }
        Ok(())
    }

    /// Build the model described by the stored config and fill its weights.
    pub fn to_model<T: Real>(&self) -> Result<SeldModel<T>> {
        let cfg = ModelConfig::from_kv(&self.config)?;
        let mut model = SeldModel::new(cfg, 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }
}
