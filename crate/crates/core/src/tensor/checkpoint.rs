//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! b"MFK1"
//! repeated until EOF:
//!   u64 name length | name bytes (UTF-8) | u64 rank | rank x u64 dims | f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::dense::Tensor;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MFK1";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes every parameter whose name starts with one of `prefixes`
/// (all parameters when `prefixes` is empty).
pub fn write_checkpoint<W: Write>(mut out: W, store: &ParamStore, prefixes: &[&str]) -> Result<()> {
    out.write_all(MAGIC)?;
    for (name, t) in store.iter() {
        if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| bad(format!("truncated while reading {what} at byte {}", *pos)))?;
    let s = &buf[*pos..end];
    *pos = end;
    Ok(s)
}

fn take_u64(buf: &[u8], pos: &mut usize, what: &str) -> Result<u64> {
    let b = take(buf, pos, 8, what)?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

/// Parses a checkpoint into a fresh store.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ParamStore> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(bad("missing MFK1 magic"));
    }
    let mut pos = 4;
    let mut store = ParamStore::new();
    while pos < buf.len() {
        let name_len = take_u64(&buf, &mut pos, "name length")? as usize;
        let name = std::str::from_utf8(take(&buf, &mut pos, name_len, "name")?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = take_u64(&buf, &mut pos, "rank")? as usize;
        if rank > 16 {
            return Err(bad(format!("implausible rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u64(&buf, &mut pos, "dims")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = take(&buf, &mut pos, count.saturating_mul(8), "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("`{name}`: {e}")))?;
        store.insert(name, t);
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore, prefixes: &[&str]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, store, prefixes)
}

pub fn load(path: &Path) -> Result<ParamStore> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Overwrites parameters of `target` from `source`, requiring every
/// `source` entry under `prefix` to exist in `target` with the same shape.
pub fn restore_into(target: &mut ParamStore, source: &ParamStore, prefix: &str) -> Result<usize> {
    let mut n = 0;
    for (name, t) in source.iter() {
        if !name.starts_with(prefix) {
            continue;
        }
        let slot = target
            .get_mut(name)
            .ok_or_else(|| bad(format!("checkpoint has unknown parameter `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(bad(format!(
                "`{name}`: checkpoint shape {:?} != model shape {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
        n += 1;
    }
    Ok(n)
}
