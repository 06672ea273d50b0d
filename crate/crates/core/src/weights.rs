//! Named weight store and its on-disk format.
//!
//! File layout (little-endian):
//!
//! ```text
//! "SCWA" | u32 version | u32 count
//! count × { u16 name_len | name bytes | u32 rank | rank × u32 extent | u8 dtype | u64 offset }
//! raw f32 data; `offset` counts bytes from the start of the data block
//! ```
//!
//! Entries are written in name order. `dtype` 0 is `f32`, the only one defined.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCWA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, Tensor<f32>>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.insert(name.into(), t);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Mismatch(format!("weight `{name}` missing")))
    }

    /// Fetches a tensor, checks its shape and converts it to `S`.
    pub fn fetch<S: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<S>> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::Mismatch(format!(
                "weight `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t.cast())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = Vec::new();
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut data = Vec::new();
        for (name, t) in &self.entries {
            head.extend_from_slice(&(name.len() as u16).to_le_bytes());
            head.extend_from_slice(name.as_bytes());
            head.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                head.extend_from_slice(&(e as u32).to_le_bytes());
            }
            head.push(0);
            head.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        head.extend_from_slice(&data);
        head
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("not a weights file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Corrupt("weight name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(Error::Corrupt(format!("weight `{name}`: unknown dtype {dtype}")));
            }
            let offset = r.u64()? as usize;
            dir.push((name, shape, offset));
        }
        let data = &bytes[r.pos..];
        let mut entries = BTreeMap::new();
        for (name, shape, offset) in dir {
            let n: usize = shape.iter().product();
            let raw = offset
                .checked_add(4 * n)
                .and_then(|end| data.get(offset..end))
                .ok_or(Error::Truncated)?;
            let vals = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.insert(name, Tensor::new(shape, vals)?);
        }
        Ok(Self { entries })
    }

    /// SHA-256 of the serialized store.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }
}

/// Deterministic per-tensor generator: the run seed mixed with a hash of the
/// tensor name, so adding a tensor never shifts the values of another.
pub fn tensor_rng(seed: u64, name: &str) -> SplitMix64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    SplitMix64::seed_from_u64(seed ^ h)
}

/// Uniform values in `[-bound, bound)`.
pub fn uniform(seed: u64, name: &str, shape: impl Into<Vec<usize>>, bound: f32) -> Tensor<f32> {
    let mut rng = tensor_rng(seed, name);
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// `(fan_in, fan_out)` weight and bias with gain `1/√fan_in`.
pub fn init_dense(store: &mut WeightStore, seed: u64, prefix: &str, fan_in: usize, fan_out: usize) {
    let b = 1.0 / (fan_in as f32).sqrt();
    let w = format!("{prefix}.weight");
    let bias = format!("{prefix}.bias");
    store.insert(&w, uniform(seed, &w, vec![fan_in, fan_out], b));
    store.insert(&bias, uniform(seed, &bias, vec![fan_out], b));
}

pub fn init_norm(store: &mut WeightStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.weight"), Tensor::filled(vec![d], 1.0));
    store.insert(format!("{prefix}.bias"), Tensor::filled(vec![d], 0.0));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_digest() {
        let mut s = WeightStore::new();
        s.insert("b", Tensor::new(vec![2], vec![1.0, -2.5]).unwrap());
        s.insert("a", uniform(7, "a", vec![3, 4], 0.5));
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"SCWA");
        let back = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest(), s.digest());
        let mut t = bytes.clone();
        t.truncate(t.len() - 1);
        assert!(matches!(WeightStore::from_bytes(&t), Err(Error::Truncated)));
        let mut v = bytes;
        v[4] = 9;
        assert!(matches!(WeightStore::from_bytes(&v), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn init_is_seeded_per_name() {
        assert_eq!(uniform(1, "x", vec![5], 1.0), uniform(1, "x", vec![5], 1.0));
        assert_ne!(uniform(1, "x", vec![5], 1.0), uniform(1, "y", vec![5], 1.0));
        assert_ne!(uniform(1, "x", vec![5], 1.0), uniform(2, "x", vec![5], 1.0));
    }
}
