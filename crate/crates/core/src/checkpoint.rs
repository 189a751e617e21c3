//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "BEVGENCK" | u32 version
//! u32 kind length | kind bytes (utf-8)
//! u64 config length | config bytes (utf-8, echoed verbatim)
//! u32 block count
//! per block: u32 name length | name | u32 ndim | u64 dims[ndim] | f64 data
//! ```
//!
//! Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use bevgen_numcore::nn::ParamStore;
use bevgen_numcore::Tensor;

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BEVGENCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the tensors belong to, e.g. `image_vq` or `prior`.
    pub kind: String,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_string(r: &mut impl Read, len: u64) -> Result<String> {
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf)?;
    if buf.len() as u64 != len {
        return Err(bad("truncated string"));
    }
    String::from_utf8(buf).map_err(|_| bad("string is not utf-8"))
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: &str, store: &ParamStore) -> Self {
        Self {
            kind: kind.to_string(),
            config: config.to_string(),
            tensors: store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy every tensor into `store`. Both sides must hold exactly the same
    /// names and shapes.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(bad(format!(
                "checkpoint has {} tensors, model {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            store
                .load(name, t.clone())
                .map_err(|e| bad(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.kind.len() as u32).to_le_bytes())?;
        w.write_all(self.kind.as_bytes())?;
        w.write_all(&(self.config.len() as u64).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut bytes = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<8>(r)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = read_u32(r)? as u64;
        let kind = read_string(r, len)?;
        let len = read_u64(r)?;
        let config = read_string(r, len)?;
        let count = read_u32(r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = read_u32(r)? as u64;
            let name = read_string(r, len)?;
            let ndim = read_u32(r)?;
            let shape: Vec<usize> = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)
                .map_err(|_| bad(format!("truncated data for {name}")))?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self {
            kind,
            config,
            tensors,
        })
    }

    /// Write atomically: temporary sibling, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Load and check the kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != kind {
            return Err(bad(format!(
                "{} holds a {} checkpoint, expected {kind}",
                path.display(),
                ck.kind
            )));
        }
        Ok(ck)
    }
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| bad(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
