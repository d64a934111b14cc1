//! Binary checkpoint format.
//!
//! ```text
//! "SANC"                magic
//! u32                   version
//! u64                   encoder seed
//! u32                   C_feat
//! u32                   C_attn
//! u32                   tensor count
//! per tensor:
//!   u16 + UTF-8         name
//!   4 x u32             dims (N, C, H, W)
//!   f32 x numel         payload
//! ```
//!
//! All integers and floats are little-endian. The encoder is stored by seed
//! only; its weights are regenerated on load. Tensors whose names start with
//! [`AUX_PREFIX`] carry auxiliary state (optimizer moments) and are ignored
//! when rebuilding the network.

use std::collections::HashMap;

use thiserror::Error;

use super::{NetConfig, TransformNet};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SANC";
pub const VERSION: u32 = 1;
pub const AUX_PREFIX: &str = "optim.";

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint holds {found} network tensors, expected {expected}")]
    TensorCountMismatch { expected: usize, found: usize },
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("duplicate tensor {0:?}")]
    DuplicateTensor(String),
    #[error("tensor {name:?} has dims {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: [usize; 4],
        found: [usize; 4],
    },
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("invalid tensor dims {0:?}")]
    BadDims([u32; 4]),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("tensor name {0:?} longer than 65535 bytes")]
    NameTooLong(String),
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_net(net: &TransformNet<f32>) -> Self {
        Self {
            config: net.config(),
            tensors: net
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, strip_grad(t)))
                .collect(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.encoder_seed.to_le_bytes());
        out.extend_from_slice(&(self.config.feat_channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.attn_channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| CheckpointError::NameTooLong(name.clone()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape().dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        let encoder_seed = r.u64("encoder seed")?;
        let feat_channels = r.u32("C_feat")? as usize;
        let attn_channels = r.u32("C_attn")? as usize;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| CheckpointError::BadName)?
                .to_owned();
            let mut dims = [0u32; 4];
            for d in &mut dims {
                *d = r.u32("tensor dims")?;
            }
            let shape = Shape::new(
                dims[0] as usize,
                dims[1] as usize,
                dims[2] as usize,
                dims[3] as usize,
            )
            .map_err(|_| CheckpointError::BadDims(dims))?;
            let payload = r.take(
                shape
                    .numel()
                    .checked_mul(4)
                    .ok_or(CheckpointError::BadDims(dims))?,
                "tensor payload",
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data).expect("length checked")));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            config: NetConfig {
                feat_channels,
                attn_channels,
                encoder_seed,
            },
            tensors,
        })
    }

    /// Rebuilds the network from the non-auxiliary tensors.
    pub fn to_net(&self) -> Result<TransformNet<f32>, CheckpointError> {
        let mut net = TransformNet::<f32>::new(self.config, 0);
        let mut found: HashMap<&str, &Tensor<f32>> = HashMap::new();
        for (name, t) in &self.tensors {
            if name.starts_with(AUX_PREFIX) {
                continue;
            }
            if found.insert(name.as_str(), t).is_some() {
                return Err(CheckpointError::DuplicateTensor(name.clone()));
            }
        }
        let known: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        if let Some(unknown) = found.keys().find(|k| !known.iter().any(|n| n == *k)) {
            return Err(CheckpointError::UnknownTensor(unknown.to_string()));
        }
        let mut slots = net.named_params_mut();
        if found.len() != slots.len() {
            return Err(CheckpointError::TensorCountMismatch {
                expected: slots.len(),
                found: found.len(),
            });
        }
        for (name, slot) in &mut slots {
            let t = found
                .remove(name.as_str())
                .expect("names and count checked");
            if t.shape() != slot.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: slot.shape().dims(),
                    found: t.shape().dims(),
                });
            }
            **slot = t.clone();
        }
        drop(slots);
        Ok(net)
    }

    pub fn aux(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n.strip_prefix(AUX_PREFIX) == Some(name))
            .map(|(_, t)| t)
    }
}

fn strip_grad(t: &Tensor<f32>) -> Tensor<f32> {
    Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(net: &TransformNet<f32>) -> Vec<u8> {
    Checkpoint::from_net(net)
        .encode()
        .expect("network tensor names are short")
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<TransformNet<f32>, CheckpointError> {
    Checkpoint::decode(bytes)?.to_net()
}
