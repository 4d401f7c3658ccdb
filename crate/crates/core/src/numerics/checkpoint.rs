//! Named-tensor checkpoint store and its binary file format.
//!
//! Layout (little-endian): magic `TPT1`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `u32` dims,
//! and `f32` data in row-major order.
//!
//! Values are held at `f32` precision in memory as well, so a checkpoint
//! read back from disk compares equal to the one written.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TPT1";
pub const VERSION: u32 = 1;
pub const H_AVG_NAME: &str = "rescorer.h_avg";

/// Tensors that are stored alongside parameters but never trained.
pub fn is_buffer(name: &str) -> bool {
    name == H_AVG_NAME || name.starts_with("emb.")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
}

fn to_f32_precision(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_store(store: &ParamStore) -> Self {
        let mut ckpt = Self::new();
        ckpt.extend_from_store(store);
        ckpt
    }

    pub fn extend_from_store(&mut self, store: &ParamStore) {
        for (_, p) in store.iter() {
            self.insert(p.name.clone(), p.value());
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(name.into(), to_f32_precision(t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Copies every parameter of `store` from this checkpoint by name.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            store.set_value(id, t.clone().reshape(store.value(id).shape().to_vec())?)?;
        }
        Ok(())
    }

    /// Element count of tensors whose name starts with `prefix`, excluding buffers.
    pub fn count_parameters(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(name, _)| name.starts_with(prefix) && !is_buffer(name))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::new();
        c.insert("a", &Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"TPT1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
        assert_eq!(buf[16], b'a');
        // rank 2, dims [1, 3], then three f32 values
        assert_eq!(buf.len(), 17 + 4 + 8 + 12);
        assert_eq!(f32::from_le_bytes(buf[29..33].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_bad_magic() {
        let r = Checkpoint::read_from(&b"NOPE\x01\0\0\0\0\0\0\0"[..]);
        assert!(matches!(r, Err(Error::Checkpoint(_))));
    }

    #[test]
    fn counts_exclude_buffers() {
        let mut c = Checkpoint::new();
        c.insert("rescorer.w", &Tensor::zeros(3, 4));
        c.insert(H_AVG_NAME, &Tensor::zeros(5, 4));
        assert_eq!(c.count_parameters("rescorer."), 12);
        assert_eq!(c.count_parameters("encoder."), 0);
    }
}
