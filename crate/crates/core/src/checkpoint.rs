//! Versioned checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SPCKPT\0\0"
//! version  u32
//! hlen     u64      length of the JSON header in bytes
//! header   hlen     {"kind", "meta", "tensors": [{"name", "shape", "offset"}],
//!                    "data_len", "data_sha256"}
//! data     f32 values of every tensor, row-major, back to back
//! ```
//!
//! `offset` counts f32 elements from the start of the data section.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

pub const MAGIC: &[u8; 8] = b"SPCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
    data_len: usize,
    data_sha256: String,
}

/// A decoded checkpoint.
#[derive(Debug)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Array2<f32>)>,
}

impl Container {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn meta_field(&self, key: &str) -> Result<&Value> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {key:?}")))
    }
}

pub fn encode<T: Real>(kind: &str, meta: Value, store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(store.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (name, value) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [value.nrows(), value.ncols()],
            offset,
        });
        for &x in value.iter() {
            data.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        offset += value.len();
    }
    let header = Header {
        kind: kind.to_string(),
        meta,
        tensors,
        data_len: data.len(),
        data_sha256: hex::encode(Sha256::digest(&data)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let corrupt = |m: &str| Error::Checkpoint(format!("corrupt checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&format!("header: {e}")))?;
    let data = &body[hlen..];
    if data.len() != header.data_len {
        return Err(corrupt(&format!(
            "data section is {} bytes, header says {}",
            data.len(),
            header.data_len
        )));
    }
    if hex::encode(Sha256::digest(data)) != header.data_sha256 {
        return Err(corrupt("data checksum mismatch"));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n = t.shape[0] * t.shape[1];
        let (start, end) = (t.offset * 4, (t.offset + n) * 4);
        if end > data.len() {
            return Err(corrupt(&format!("tensor {} out of bounds", t.name)));
        }
        let values: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), values)
            .map_err(|e| corrupt(&e.to_string()))?;
        tensors.push((t.name, arr));
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

pub fn write<T: Real>(path: impl AsRef<Path>, kind: &str, meta: Value, store: &ParamStore<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(kind, meta, store)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a", Array2::from_shape_vec((2, 3), vec![1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]).unwrap());
        s.add("b", Array2::from_elem((1, 1), f32::MAX));
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = store();
        let c = decode(&encode("test", serde_json::json!({"x": 1}), &s).unwrap()).unwrap();
        assert_eq!(c.kind, "test");
        assert_eq!(c.meta["x"], 1);
        for ((name, got), (want_name, want)) in c.tensors.iter().zip(s.iter()) {
            assert_eq!(name, want_name);
            let a: Vec<u32> = got.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = want.iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn version_mismatch_and_corruption_are_detected() {
        let bytes = encode("test", Value::Null, &store()).unwrap();
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(decode(&v).unwrap_err().to_string().contains("version"));
        let mut c = bytes.clone();
        let last = c.len() - 1;
        c[last] ^= 1;
        assert!(decode(&c).unwrap_err().to_string().contains("checksum"));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"not a checkpoint at all").is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read("/nonexistent/dir/x.ckpt"), Err(Error::Io { .. })));
    }
}
