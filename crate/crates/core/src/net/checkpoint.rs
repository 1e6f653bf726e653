//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "CDP1"                      magic
//! u32                         format version
//! u32                         tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank × u64 extents
//!   f32 payload, row-major
//! u64                         metadata length
//! metadata                    JSON object
//! ```

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::{NetConfig, NetParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    pub init_seed: u64,
    pub training: Option<TrainingState>,
}

/// What the trainer knew about the parameters when it saved them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub mode: String,
    pub epoch: usize,
    pub seed: u64,
    pub manifest_hash: String,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub main_val_acc: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetParams<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(params: NetParams<f32>, training: Option<TrainingState>) -> Self {
        let meta = CheckpointMeta {
            net: params.config().clone(),
            init_seed: params.init_seed(),
            training,
        };
        Self { params, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        save_checkpoint(&self.params, &self.meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, meta) = load_checkpoint(bytes)?;
        Ok(Self { params, meta })
    }
}

pub fn save_checkpoint(params: &NetParams<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.parameter_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for (name, t) in params.named_tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} too large")))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(NetParams<f32>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a CDP1 checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = r.u32("tensor count")? as usize;
    let mut named = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.len("extent"))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let payload = r.take(n, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    let meta_len = r.len("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after metadata",
            bytes.len() - r.pos
        )));
    }
    let layout = meta.net.layout();
    for ((expected, _), (found, _)) in layout.iter().zip(&named) {
        if expected != found {
            return Err(Error::Checkpoint(format!(
                "tensor `{found}` where `{expected}` was expected"
            )));
        }
    }
    let tensors = named.into_iter().map(|(_, t)| t).collect();
    let params = NetParams::from_tensors(meta.net.clone(), tensors, meta.init_seed)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((params, meta))
}
