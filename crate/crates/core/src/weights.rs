//! The `FNW1` weight file.
//!
//! Little-endian throughout: the magic `FNW1`, a `u32` record count, then
//! per record four `u32` extents followed by that many `f64` values.
//! Tensors of rank below four are padded with trailing unit extents.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FNW1";

pub fn encode(records: &[&Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for t in records {
        if t.rank() > 4 {
            return Err(Error::dim("save_weights", format!("rank-{} tensor", t.rank())));
        }
        let mut dims = [1u32; 4];
        for (d, &s) in dims.iter_mut().zip(t.shape()) {
            *d = s as u32;
        }
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write(path: &Path, records: &[&Tensor]) -> Result<()> {
    let bytes = encode(records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::WeightLoad {
            path: self.path.to_path_buf(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail("truncated file"))?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice has length N"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }
}

/// Parses weight records; every record comes back as a 4-D tensor.
pub fn decode(path: &Path, bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { path, bytes, pos: 0 };
    if &r.take::<4>()? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic (expected FNW1)"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let start = r.pos;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = match n {
            Some(n) if n.checked_mul(8).is_some_and(|b| b <= bytes.len()) => n,
            _ => {
                r.pos = start;
                return Err(r.fail(format!("implausible record shape {dims:?}")));
            }
        };
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = f64::from_le_bytes(r.take::<8>()?);
            if !v.is_finite() {
                r.pos -= 8;
                return Err(r.fail("non-finite weight"));
            }
            data.push(v);
        }
        out.push(Tensor::from_parts(dims.to_vec(), data));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last record"));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}
