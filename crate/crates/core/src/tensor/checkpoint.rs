//! Binary tensor record files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EPRO" | version: u32 | record*
//! record = name_len: u32 | name: utf-8 | rank: u32 | dims: u32 * rank | payload: f64 * prod(dims)
//! ```
//!
//! Records run to end of file. Parameter checkpoints and dataset sample
//! files share this layout.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EPRO";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_records<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a record buffer. `path` is only used in error messages.
pub fn read_records(buf: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { buf, pos: 0, path };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        cur.pos = 0;
        return Err(cur.fail("bad magic, expected \"EPRO\""));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        cur.pos -= 4;
        return Err(cur.fail(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while cur.pos < buf.len() {
        let name_len = cur.u32("name length")? as usize;
        let start = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len, "name")?).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            offset: start as u64,
            msg: "name is not valid utf-8".into(),
        })?;
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dims")? as usize);
        }
        let count: usize = shape.iter().product();
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| cur.fail("payload size overflows"))?;
        let payload = cur.take(bytes, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        records.push((name.to_string(), Tensor::new(shape, data)?));
    }
    Ok(records)
}

pub fn write_checkpoint<'a>(
    path: &Path,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, write_records(records)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_records(&buf, path)
}
