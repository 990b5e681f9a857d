//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "FFCL" | u32 version | u32 header_len | header (UTF-8 JSON) | u32 tensor_count
//! per tensor: u16 name_len | name | u8 ndim | u64 dims[ndim] | f32 data[prod(dims)]
//! ```
//!
//! The JSON header carries the model config and the training-stage tag.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelConfig};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FFCL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    LocalPretrained,
    GlobalPretrained,
    Finetuned,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::LocalPretrained => "local-pretrained",
            Stage::GlobalPretrained => "global-pretrained",
            Stage::Finetuned => "finetuned",
        })
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local-pretrained" => Ok(Stage::LocalPretrained),
            "global-pretrained" => Ok(Stage::GlobalPretrained),
            "finetuned" => Ok(Stage::Finetuned),
            other => Err(format!("unknown stage tag `{other}`")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    stage: Stage,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &Model<f32>, stage: Stage) -> Result<(), CheckpointError> {
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        stage,
    })
    .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + header.len() + model.params.num_values() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| CheckpointError::Malformed(format!("parameter name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.ndim() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'b [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint; nothing is returned unless the whole file is valid.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model<f32>, Stage), CheckpointError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let header_len = c.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(c.take(header_len, "header")?)
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let count = c.u32("tensor count")? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = c.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|e| CheckpointError::Malformed(format!("tensor name: {e}")))?
            .to_string();
        let ndim = c.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64("tensor dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` too large")))?;
        let raw = c.take(
            numel.checked_mul(4).ok_or(CheckpointError::Truncated("tensor data"))?,
            "tensor data",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        params
            .insert(name, t)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }

    let reference = build_model(&header.model).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if reference.params.len() != params.len() {
        return Err(CheckpointError::Malformed(format!(
            "expected {} tensors for this config, found {}",
            reference.params.len(),
            params.len()
        )));
    }
    for (name, t) in reference.params.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(CheckpointError::Malformed(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(CheckpointError::Malformed(format!("missing tensor `{name}`"))),
        }
    }
    Ok((
        Model {
            config: header.model,
            params,
        },
        header.stage,
    ))
}

pub fn save_checkpoint(model: &Model<f32>, stage: Stage, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), model, stage)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, Stage), CheckpointError> {
    read_checkpoint(std::fs::File::open(path)?)
}
