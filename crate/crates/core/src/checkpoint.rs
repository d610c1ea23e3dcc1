//! Flat binary container for named tensors.
//!
//! Layout: 4 magic bytes, a version byte (`0x01`), then for each entry until
//! end of file:
//!
//! ```text
//! u64 name length | name (UTF-8) | u64 rank | rank × u64 extents | f64 values
//! ```
//!
//! All integers and floats are little-endian. Model checkpoints use the magic
//! `AUGM`, dataset caches `AUGD`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"AUGM";
pub const DATASET_MAGIC: [u8; 4] = *b"AUGD";
pub const FORMAT_VERSION: u8 = 0x01;

pub fn encode(magic: [u8; 4], entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    out.push(FORMAT_VERSION);
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(magic: [u8; 4], bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4, "magic")? != magic {
        c.pos = 0;
        return Err(c.err(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = c.take(1, "version")?[0];
    if version != FORMAT_VERSION {
        c.pos -= 1;
        return Err(c.err(format!("unsupported format version {version}")));
    }
    let mut entries = Vec::new();
    while c.pos < bytes.len() {
        let name_len = c.u64("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| c.err("name is not UTF-8"))?
            .to_owned();
        let rank = c.u64("rank")? as usize;
        if rank > 8 {
            return Err(c.err(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("extent")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| c.err("extent overflow"))?;
        let raw = c.take(count.checked_mul(8).ok_or_else(|| c.err("size overflow"))?, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| c.err(e.to_string()))?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn save(path: &Path, magic: [u8; 4], entries: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(magic, entries);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, magic: [u8; 4]) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes, path)
}
