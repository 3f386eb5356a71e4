//! Single-file tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      [u8; 4]
//! version    u32
//! header_len u64
//! header     JSON { "meta": ..., "tensors": [{ "name", "shape", "offset" }] }
//! payload    f32 values, tensors back to back
//! ```
//!
//! Offsets count f32 elements from the start of the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, Default)]
pub struct TensorFile {
    pub meta: Value,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl TensorFile {
    pub fn new(meta: Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Result<ArrayD<f32>> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing from container")))?;
        Ok(self.tensors.swap_remove(pos).1)
    }

    pub fn write_to<W: Write>(&self, magic: &[u8; 4], mut w: W) -> Result<()> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors: entries })?;
        w.write_all(magic)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, t) in &self.tensors {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(magic: &[u8; 4], mut r: R) -> Result<Self> {
        let mut m = [0u8; 4];
        r.read_exact(&mut m)?;
        if &m != magic {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CONTAINER_VERSION {
            return Err(Error::Checkpoint(format!("unsupported container version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut hbuf = vec![0u8; len];
        r.read_exact(&mut hbuf)?;
        let header: Header = serde_json::from_slice(&hbuf)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() % 4 != 0 {
            return Err(Error::Checkpoint("payload is not a whole number of f32 values".into()));
        }
        let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the payload", e.name)))?;
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), slice.to_vec())
                .map_err(|err| Error::Checkpoint(format!("tensor `{}`: {err}", e.name)))?;
            tensors.push((e.name, arr));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, magic: &[u8; 4], path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        self.write_to(magic, BufWriter::new(File::create(path)?))
    }

    pub fn load(magic: &[u8; 4], path: &Path) -> Result<Self> {
        Self::read_from(magic, BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn round_trip_preserves_bits() {
        let mut tf = TensorFile::new(serde_json::json!({"k": 1}));
        tf.push("a", Array::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap());
        tf.push("b", Array::from_shape_vec(IxDyn(&[3]), vec![0.1, 0.2, 0.3]).unwrap());
        let mut buf = Vec::new();
        tf.write_to(b"TEST", &mut buf).unwrap();
        let back = TensorFile::read_from(b"TEST", buf.as_slice()).unwrap();
        assert_eq!(back.meta["k"], 1);
        for ((n1, t1), (n2, t2)) in tf.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.iter().zip(t2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(TensorFile::read_from(b"NOPE", buf.as_slice()).is_err());
    }
}
