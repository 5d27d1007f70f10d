//! Single-file checkpoint format. All integers little-endian.
//!
//! ```text
//! magic      8 bytes   "SSMLABCK"
//! version    u32       currently 1
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 JSON: {"config": ModelConfig, "meta": any}
//! dtype      u8        0 = f64, 1 = f32
//! count      u32       number of tensors
//! repeated count times:
//!   name_len u16, name (UTF-8)
//!   ndim     u8,  dims (u32 each)
//!   data     product(dims) values of dtype, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::ndcore::{Precision, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSMLABCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A loaded model plus free-form metadata (provenance, training step).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: LanguageModel,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, model: &LanguageModel, meta: &serde_json::Value, dtype: Precision) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        meta: meta.clone(),
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.push(match dtype {
        Precision::F64 => 0,
        Precision::F32 => 1,
    });
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.ndim() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            match dtype {
                Precision::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint {
                path: self.path.to_path_buf(),
                msg: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic (not a checkpoint file)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(meta_len)?)?;
    let width = match r.u8()? {
        0 => 8,
        1 => 4,
        other => return Err(bad(format!("unknown dtype tag {other}"))),
    };
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| bad(e.to_string()))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * width)?;
        let data = raw
            .chunks_exact(width)
            .map(|c| match width {
                8 => f64::from_le_bytes(c.try_into().unwrap()),
                _ => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            })
            .collect();
        names.push(name);
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let model = LanguageModel::from_params(header.config, ParamStore::new(names, tensors)?)
        .map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}
