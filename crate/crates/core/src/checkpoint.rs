//! Versioned binary container for named `f32` tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"PMRICKPT"
//! u32    format version
//! u64    header length, then UTF-8 TOML header
//! u64    tensor count, then per tensor:
//!        u32 name length, name bytes, u32 rank, rank x u64 dims,
//!        prod(dims) x f32
//! 32     SHA-256 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PMRICKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: toml::Table,
    tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn new(header: toml::Table) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f32>) {
        self.tensors.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn tensors(&self) -> &[(String, ArrayD<f32>)] {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = toml::to_string(&self.header).expect("toml tables always serialise");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, v) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(v.ndim() as u32).to_le_bytes());
            for &d in v.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let actual = Sha256::digest(body);
        if actual.as_slice() != digest {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                expected: hex::encode(digest),
                actual: hex::encode(actual),
            });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32().ok_or_else(|| bad("truncated"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = r.u64().ok_or_else(|| bad("truncated"))? as usize;
        let header = std::str::from_utf8(r.take(hlen).ok_or_else(|| bad("truncated header"))?)
            .map_err(|_| bad("header is not UTF-8"))?;
        let header: toml::Table = header.parse().map_err(|e: toml::de::Error| bad(&e.to_string()))?;
        let count = r.u64().ok_or_else(|| bad("truncated"))?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = r.u32().ok_or_else(|| bad("truncated"))? as usize;
            let name = String::from_utf8(r.take(nlen).ok_or_else(|| bad("truncated"))?.to_vec())
                .map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = r.u32().ok_or_else(|| bad("truncated"))? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("truncated"))?;
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let v = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| bad(&e.to_string()))?;
            tensors.push((name, v));
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, tensors })
    }

    /// Writes to a sibling temp file, syncs, then renames over `path`, so a
    /// reader never observes a partial checkpoint.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file_name = path
            .file_name()
            .ok_or_else(|| Error::Config(format!("checkpoint path {} has no file name", path.display())))?;
        let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(format!("checkpoint {}", path.display())));
        }
        Self::from_bytes(&fs::read(path)?, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
