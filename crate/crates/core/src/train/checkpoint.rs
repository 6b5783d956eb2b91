//! Checkpoint container: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header (free-form metadata plus a blob directory), then the
//! raw little-endian `f32` blobs the directory points into.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"MDIRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub name: String,
    /// Byte offset from the start of the blob section.
    pub offset: u64,
    /// Byte length (4 per element).
    pub length: u64,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: u32,
    meta: serde_json::Value,
    blobs: Vec<BlobEntry>,
}

/// An in-memory checkpoint: metadata and named tensors, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub blobs: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, blobs: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate blob {name}")));
        }
        self.blobs.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor<f32>> {
        let i = self.blobs.iter().position(|(n, _)| n == name)?;
        Some(self.blobs.remove(i).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let blobs = self
            .blobs
            .iter()
            .map(|(name, t)| {
                let length = 4 * t.len() as u64;
                let e = BlobEntry {
                    name: name.clone(),
                    offset,
                    length,
                    shape: t.shape().to_vec(),
                };
                offset += length;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            format: FORMAT_VERSION,
            meta: self.meta.clone(),
            blobs,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let hend = 16usize
            .checked_add(usize::try_from(hlen).map_err(|_| bad("header length overflow"))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])?;
        if header.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format)));
        }
        let data = &bytes[hend..];
        let mut blobs = Vec::with_capacity(header.blobs.len());
        for e in header.blobs {
            let n: usize = e.shape.iter().product();
            if e.length != 4 * n as u64 {
                return Err(Error::Checkpoint(format!("blob {} length does not match its shape", e.name)));
            }
            let start = e.offset as usize;
            let end = start
                .checked_add(e.length as usize)
                .filter(|&x| x <= data.len())
                .ok_or_else(|| Error::Checkpoint(format!("blob {} runs past the end of the file", e.name)))?;
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blobs.push((e.name, Tensor::new(&e.shape, values)?));
        }
        Ok(Checkpoint { meta: header.meta, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Adds every parameter and buffer of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) -> Result<()> {
        for p in store.params() {
            self.push(format!("{prefix}param/{}", p.name), p.tensor.clone().with_requires_grad(false))?;
        }
        for (name, t) in store.buffers() {
            self.push(format!("{prefix}buffer/{name}"), t.clone())?;
        }
        Ok(())
    }

    /// Overwrites every parameter and buffer of `store` from blobs under
    /// `prefix`; all must be present with matching shapes.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        for p in store.params_mut() {
            let name = format!("{prefix}param/{}", p.name);
            let src = self.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing blob {name}")))?;
            copy_checked(&name, src, &mut p.tensor)?;
        }
        for (bname, t) in store.buffers_mut() {
            let name = format!("{prefix}buffer/{bname}");
            let src = self.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing blob {name}")))?;
            copy_checked(&name, src, t)?;
        }
        Ok(())
    }
}

fn copy_checked(name: &str, src: &Tensor<f32>, dst: &mut Tensor<f32>) -> Result<()> {
    if src.shape() != dst.shape() {
        return Err(Error::Checkpoint(format!(
            "blob {name} has shape {:?}, expected {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

/// Exact position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// 32-byte key, hex.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal (JSON numbers cannot hold it).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}
