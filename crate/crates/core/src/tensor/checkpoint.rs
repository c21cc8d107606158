//! Binary checkpoint format.
//!
//! ```text
//! magic   b"JPCK"
//! version u8 (= 1)
//! count   u32 LE
//! count × { name_len u32 LE, name UTF-8, ndim u32 LE, dims u64 LE × ndim, values f64 LE × prod(dims) }
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"JPCK";
const VERSION: u8 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.len() * 8);
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let b = read_exact(r, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let magic = read_exact(&mut r, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic header".into()));
    }
    let version = read_exact(&mut r, 1, "version")?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, "entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let name = String::from_utf8(read_exact(&mut r, name_len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let b = read_exact(&mut r, 8, "dimension")?;
            shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = read_exact(&mut r, len * 8, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(entries)
}

pub fn write_checkpoint_file(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, entries)?;
    fs::write(path, buf).map_err(|e| Error::file(path, e))
}

pub fn read_checkpoint_file(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    read_checkpoint(bytes.as_slice())
}
