//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TMPICKPT"
//! version  u32
//! hlen     u64      length of the JSON header in bytes
//! header   hlen bytes of UTF-8 JSON
//! payload  for each block in header order: value, m, v as f32 LE
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamBlock;
use super::{ParamStore, Real};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TMPICKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "tmpi-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    step: u64,
    config: serde_json::Value,
    blocks: Vec<BlockHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
    adam_step: u64,
    trainable: bool,
}

/// Everything needed to resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint<R> {
    /// Number of optimizer steps already taken.
    pub step: u64,
    /// Model and training configuration.
    pub config: serde_json::Value,
    pub store: ParamStore<R>,
}

impl<R: Real> Checkpoint<R> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT_TAG.into(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.config.clone(),
            blocks: self
                .store
                .blocks()
                .iter()
                .map(|b| BlockHeader {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    adam_step: b.step,
                    trainable: b.trainable,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.store.num_scalars() * 3 * 4;
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in self.store.blocks() {
            for buf in [&b.value, &b.m, &b.v] {
                for x in buf {
                    out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(cur.take(hlen)?)?;
        if header.format != FORMAT_TAG || header.version != version {
            return Err(Error::Format(format!(
                "header format tag {:?} v{} does not match container",
                header.format, header.version
            )));
        }
        let mut store = ParamStore::new();
        for bh in header.blocks {
            let n: usize = bh.shape.iter().product();
            let value = cur.floats::<R>(n)?;
            let m = cur.floats::<R>(n)?;
            let v = cur.floats::<R>(n)?;
            store.push_block(ParamBlock {
                name: bh.name,
                shape: bh.shape,
                grad: vec![R::zero(); n],
                value,
                m,
                v,
                step: bh.adam_step,
                trainable: bh.trainable,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self {
            step: header.step,
            config: header.config,
            store,
        })
    }

    /// Writes through a temporary file so an interrupted write never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn floats<R: Real>(&mut self, n: usize) -> Result<Vec<R>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("block too large".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| R::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect())
    }
}
