//! Self-describing binary container shared by trajectories, hierarchy caches
//! and checkpoints.
//!
//! Layout: a 5-byte magic tag, the JSON header length as `u32` little-endian,
//! the JSON header, then the raw little-endian data blocks in the order the
//! header declares them.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
    U64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F64 | DType::U64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U64(Vec<u64>),
}

impl BlockData {
    fn dtype(&self) -> DType {
        match self {
            BlockData::F64(_) => DType::F64,
            BlockData::F32(_) => DType::F32,
            BlockData::U64(_) => DType::U64,
        }
    }

    fn len(&self) -> usize {
        match self {
            BlockData::F64(v) => v.len(),
            BlockData::F32(v) => v.len(),
            BlockData::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: BlockData,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    blocks: Vec<BlockHeader>,
}

/// In-memory form of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub blocks: Vec<Block>,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Container {
            meta,
            blocks: Vec::new(),
        }
    }

    pub fn push_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        self.push(name, shape, BlockData::F64(data));
    }

    pub fn push_f32(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        self.push(name, shape, BlockData::F32(data));
    }

    pub fn push_u64(&mut self, name: &str, shape: Vec<usize>, data: Vec<u64>) {
        self.push(name, shape, BlockData::U64(data));
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: BlockData) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.blocks.push(Block {
            name: name.to_string(),
            shape,
            data,
        });
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Data(format!("missing block '{name}'")))
    }

    pub fn f64_block(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let b = self.block(name)?;
        match &b.data {
            BlockData::F64(v) => Ok((&b.shape, v)),
            _ => Err(Error::Data(format!("block '{name}' is not f64"))),
        }
    }

    pub fn f32_block(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let b = self.block(name)?;
        match &b.data {
            BlockData::F32(v) => Ok((&b.shape, v)),
            _ => Err(Error::Data(format!("block '{name}' is not f32"))),
        }
    }

    pub fn u64_block(&self, name: &str) -> Result<(&[usize], &[u64])> {
        let b = self.block(name)?;
        match &b.data {
            BlockData::U64(v) => Ok((&b.shape, v)),
            _ => Err(Error::Data(format!("block '{name}' is not u64"))),
        }
    }

    pub fn to_bytes(&self, magic: &[u8; MAGIC_LEN]) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockHeader {
                    name: b.name.clone(),
                    dtype: b.data.dtype(),
                    shape: b.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(json.len())
            .map_err(|_| Error::Data("container header exceeds 4 GiB".into()))?;
        let payload: usize = self
            .blocks
            .iter()
            .map(|b| b.data.len() * b.data.dtype().size())
            .sum();
        let mut out = Vec::with_capacity(MAGIC_LEN + 4 + json.len() + payload);
        out.extend_from_slice(magic);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for b in &self.blocks {
            match &b.data {
                BlockData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; MAGIC_LEN]) -> Result<Self> {
        if bytes.len() < MAGIC_LEN {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                reason: "truncated before magic".into(),
            });
        }
        if &bytes[..MAGIC_LEN] != magic {
            return Err(Error::VersionMismatch {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&bytes[..MAGIC_LEN]).into_owned(),
            });
        }
        let mut pos = MAGIC_LEN;
        if bytes.len() < pos + 4 {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                reason: "truncated header length".into(),
            });
        }
        let header_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if bytes.len() < pos + header_len {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                reason: format!("truncated header: need {header_len} bytes at {pos}"),
            });
        }
        let header: Header =
            serde_json::from_slice(&bytes[pos..pos + header_len]).map_err(|e| Error::Format {
                offset: pos as u64,
                reason: format!("malformed header json: {e}"),
            })?;
        pos += header_len;

        let mut blocks = Vec::with_capacity(header.blocks.len());
        for bh in header.blocks {
            let count: usize = bh.shape.iter().product();
            let nbytes = count * bh.dtype.size();
            if bytes.len() < pos + nbytes {
                return Err(Error::Format {
                    offset: bytes.len() as u64,
                    reason: format!(
                        "block '{}' truncated: need {nbytes} bytes starting at {pos}",
                        bh.name
                    ),
                });
            }
            let raw = &bytes[pos..pos + nbytes];
            let data = match bh.dtype {
                DType::F64 => BlockData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F32 => BlockData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::U64 => BlockData::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            pos += nbytes;
            blocks.push(Block {
                name: bh.name,
                shape: bh.shape,
                data,
            });
        }
        if pos != bytes.len() {
            return Err(Error::Format {
                offset: pos as u64,
                reason: format!("{} trailing bytes", bytes.len() - pos),
            });
        }
        Ok(Container {
            meta: header.meta,
            blocks,
        })
    }

    pub fn write_to(&self, path: &Path, magic: &[u8; MAGIC_LEN]) -> Result<()> {
        let bytes = self.to_bytes(magic)?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(path: &Path, magic: &[u8; MAGIC_LEN]) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, magic)
    }
}
