//! Versioned binary container shared by feature caches, codebooks, Mel outputs
//! and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DPTS"
//! 4       1     format version (currently 1)
//! 5       1     kind (1 features, 2 checkpoint, 3 mel, 4 codebook)
//! 6       8     header length H
//! 14      H     UTF-8 JSON header {"meta": ..., "blobs": [{name, dtype, shape, offset, len}]}
//! 14+H    8     payload length P
//! 22+H    P     payload: concatenated blob bytes, offsets relative to payload start
//! 22+H+P  32    SHA-256 of every preceding byte
//! ```
//!
//! Writes go to a temporary sibling file that is renamed into place, so a
//! reader never observes a partially written container.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DPTS";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ContainerKind {
    Features = 1,
    Checkpoint = 2,
    Mel = 3,
    Codebook = 4,
}

impl ContainerKind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            1 => Self::Features,
            2 => Self::Checkpoint,
            3 => Self::Mel,
            4 => Self::Codebook,
            other => return Err(Error::Container(format!("unknown container kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl BlobData {
    fn dtype_name(&self) -> &'static str {
        match self {
            BlobData::F32(_) => "f32",
            BlobData::F64(_) => "f64",
            BlobData::I64(_) => "i64",
        }
    }

    fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
            BlobData::I64(v) => v.len(),
        }
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        match self {
            BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn from_bytes(dtype: &str, bytes: &[u8]) -> Result<Self> {
        fn chunks<const N: usize>(bytes: &[u8]) -> impl Iterator<Item = [u8; N]> + '_ {
            bytes.chunks_exact(N).map(|c| c.try_into().expect("exact chunk"))
        }
        Ok(match dtype {
            "f32" => BlobData::F32(chunks::<4>(bytes).map(f32::from_le_bytes).collect()),
            "f64" => BlobData::F64(chunks::<8>(bytes).map(f64::from_le_bytes).collect()),
            "i64" => BlobData::I64(chunks::<8>(bytes).map(i64::from_le_bytes).collect()),
            other => return Err(Error::Container(format!("unknown blob dtype {other:?}"))),
        })
    }

    fn elem_size(dtype: &str) -> usize {
        match dtype {
            "f32" => 4,
            _ => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub data: BlobData,
}

#[derive(Serialize, Deserialize)]
struct BlobIndex {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    blobs: Vec<BlobIndex>,
}

/// In-memory container: a JSON metadata value plus named typed arrays.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: ContainerKind,
    pub meta: serde_json::Value,
    blobs: BTreeMap<String, Blob>,
}

impl Container {
    pub fn new(kind: ContainerKind, meta: serde_json::Value) -> Self {
        Self {
            kind,
            meta,
            blobs: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, name: impl Into<String>, shape: Vec<usize>, data: BlobData) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Container(format!(
                "blob shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        self.blobs.insert(name.into(), Blob { shape, data });
        Ok(())
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => BlobData::F64(flat.to_vec1::<f64>()?),
            DType::F32 => BlobData::F32(flat.to_vec1::<f32>()?),
            DType::I64 => BlobData::I64(flat.to_vec1::<i64>()?),
            other => {
                return Err(Error::Container(format!("unsupported tensor dtype {other:?}")));
            }
        };
        self.put(name, shape, data)
    }

    pub fn blob(&self, name: &str) -> Result<&Blob> {
        self.blobs
            .get(name)
            .ok_or_else(|| Error::Container(format!("missing blob {name:?}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.blobs.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blobs.keys().map(String::as_str)
    }

    pub fn f32s(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let b = self.blob(name)?;
        match &b.data {
            BlobData::F32(v) => Ok((&b.shape, v)),
            _ => Err(Error::Container(format!("blob {name:?} is not f32"))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let b = self.blob(name)?;
        match &b.data {
            BlobData::F64(v) => Ok((&b.shape, v)),
            _ => Err(Error::Container(format!("blob {name:?} is not f64"))),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<(&[usize], &[i64])> {
        let b = self.blob(name)?;
        match &b.data {
            BlobData::I64(v) => Ok((&b.shape, v)),
            _ => Err(Error::Container(format!("blob {name:?} is not i64"))),
        }
    }

    /// Loads a blob as a tensor with the dtype it was stored in.
    pub fn tensor(&self, name: &str, device: &Device) -> Result<Tensor> {
        let b = self.blob(name)?;
        let t = match &b.data {
            BlobData::F32(v) => Tensor::from_slice(v, b.shape.as_slice(), device)?,
            BlobData::F64(v) => Tensor::from_slice(v, b.shape.as_slice(), device)?,
            BlobData::I64(v) => Tensor::from_slice(v, b.shape.as_slice(), device)?,
        };
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut index = Vec::with_capacity(self.blobs.len());
        for (name, blob) in &self.blobs {
            let offset = payload.len() as u64;
            blob.data.write_bytes(&mut payload);
            index.push(BlobIndex {
                name: name.clone(),
                dtype: blob.data.dtype_name().to_string(),
                shape: blob.shape.clone(),
                offset,
                len: payload.len() as u64 - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            blobs: index,
        })?;
        let mut out = Vec::with_capacity(22 + header.len() + payload.len() + 32);
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Container("truncated container".to_string());
        if bytes.len() < 6 + 8 + 8 + 32 {
            return Err(truncated());
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Container("bad magic bytes".to_string()));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: bytes[4],
                expected: FORMAT_VERSION,
            });
        }
        let kind = ContainerKind::from_byte(bytes[5])?;
        let read_u64 = |at: usize| -> Result<u64> {
            let s = bytes.get(at..at + 8).ok_or_else(truncated)?;
            Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
        };
        let header_len = usize::try_from(read_u64(6)?).map_err(|_| truncated())?;
        let header_end = 14usize.checked_add(header_len).ok_or_else(truncated)?;
        let payload_len = usize::try_from(read_u64(header_end)?).map_err(|_| truncated())?;
        let payload_start = header_end + 8;
        let payload_end = payload_start.checked_add(payload_len).ok_or_else(truncated)?;
        if bytes.len() != payload_end + 32 {
            return Err(truncated());
        }
        let digest = Sha256::digest(&bytes[..payload_end]);
        if digest.as_slice() != &bytes[payload_end..] {
            return Err(Error::Container("checksum mismatch (corrupt container)".to_string()));
        }
        let header: Header = serde_json::from_slice(&bytes[14..header_end])?;
        let payload = &bytes[payload_start..payload_end];
        let mut blobs = BTreeMap::new();
        for entry in header.blobs {
            let start = entry.offset as usize;
            let end = start + entry.len as usize;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Container(format!("blob {:?} out of bounds", entry.name)))?;
            let numel: usize = entry.shape.iter().product();
            if numel * BlobData::elem_size(&entry.dtype) != raw.len() {
                return Err(Error::Container(format!("blob {:?} has inconsistent length", entry.name)));
            }
            let data = BlobData::from_bytes(&entry.dtype, raw)?;
            blobs.insert(
                entry.name,
                Blob {
                    shape: entry.shape,
                    data,
                },
            );
        }
        Ok(Self {
            kind,
            meta: header.meta,
            blobs,
        })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file_name = path
            .file_name()
            .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path, expected: ContainerKind) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c = Self::from_bytes(&bytes)
            .map_err(|e| match e {
                Error::Container(msg) => Error::Container(format!("{}: {msg}", path.display())),
                other => other,
            })?;
        if c.kind != expected {
            return Err(Error::Container(format!(
                "{}: expected a {expected:?} container, found {:?}",
                path.display(),
                c.kind
            )));
        }
        Ok(c)
    }
}
