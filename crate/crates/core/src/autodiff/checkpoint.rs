//! Binary parameter and optimizer files.
//!
//! Layout (little-endian): magic `VADD`, version `u32`, entry count `u32`,
//! then per entry: name length `u32`, UTF-8 name, rank `u32`, extents as
//! `u64`, raw `f64` data. Optimizer files use the same layout with `m.` and
//! `v.` name prefixes, followed by the step counter as a trailing `u64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::adam::AdamState;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"VADD";
pub const VERSION: u32 = 1;

fn put_entry<T: Scalar>(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in data {
        buf.extend_from_slice(&x.as_f64().to_le_bytes());
    }
}

fn header(count: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    buf
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_params<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut buf = header(store.len());
    for (name, t) in store.iter() {
        put_entry(&mut buf, name, t.shape(), t.data());
    }
    buf
}

pub fn save_params<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    write_atomic(path, &encode_params(store))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_entries<'a>(cur: &mut Cursor<'a>) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    if cur.take(4)? != MAGIC {
        return Err(Error::format(cur.path, "bad magic, expected VADD"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(cur.path, format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::format(cur.path, "entry name is not UTF-8"))?
            .to_owned();
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        out.push((name, shape, data));
    }
    Ok(out)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub fn decode_params<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ParamStore<T>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let mut store = ParamStore::new();
    for (name, shape, data) in decode_entries(&mut cur)? {
        let data = data.into_iter().map(T::lit).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
        store.insert(&name, t)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last entry"));
    }
    Ok(store)
}

pub fn load_params<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    decode_params(&read_all(path)?, path)
}

pub fn save_adam<T: Scalar>(path: &Path, adam: &AdamState<T>) -> Result<()> {
    let mut buf = header(adam.m.len() + adam.v.len());
    for (name, m) in &adam.m {
        put_entry(&mut buf, &format!("m.{name}"), &[m.len()], m);
    }
    for (name, v) in &adam.v {
        put_entry(&mut buf, &format!("v.{name}"), &[v.len()], v);
    }
    buf.extend_from_slice(&adam.step.to_le_bytes());
    write_atomic(path, &buf)
}

/// Restores moments and step counter into `adam`, keeping its
/// hyperparameters.
pub fn load_adam<T: Scalar>(path: &Path, adam: &mut AdamState<T>) -> Result<()> {
    let bytes = read_all(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    adam.m.clear();
    adam.v.clear();
    for (name, _, data) in decode_entries(&mut cur)? {
        let data = data.into_iter().map(T::lit).collect();
        if let Some(rest) = name.strip_prefix("m.") {
            adam.m.insert(rest.to_owned(), data);
        } else if let Some(rest) = name.strip_prefix("v.") {
            adam.v.insert(rest.to_owned(), data);
        } else {
            return Err(Error::format(path, format!("unexpected optimizer entry `{name}`")));
        }
    }
    adam.step = cur.u64()?;
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after step counter"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let mut s = ParamStore::<f64>::new();
        s.insert("ab", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
        let bytes = encode_params(&s);
        let mut want = Vec::new();
        want.extend_from_slice(b"VADD");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("x.ckpt");
        assert!(decode_params::<f64>(b"NOPE\x01\0\0\0\0\0\0\0", p).is_err());
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let bytes = encode_params(&s);
        let err = decode_params::<f64>(&bytes[..bytes.len() - 3], p).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn adam_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.get_mut("w").unwrap().grad_mut().unwrap().copy_from_slice(&[0.5, -0.25]);
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut s, 0).unwrap();
        let path = dir.path().join("opt.adam");
        save_adam(&path, &adam).unwrap();
        let mut back = AdamState::new(1e-3);
        load_adam(&path, &mut back).unwrap();
        assert_eq!(back, adam);
    }
}
