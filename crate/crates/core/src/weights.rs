//! Named tensor collection and its binary file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "WLDW" | u32 version (1) | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | rank × u32 dims | f32 data
//! u32 CRC-32 (IEEE) of every preceding byte
//! ```

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result, WeightFileError};
use crate::graph::{param_specs, NetGraph, ParamSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WLDW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    tensors: IndexMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(WeightFileError::DuplicateName(name).into());
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total float count over tensors whose name passes `keep`.
    pub fn element_count(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(n, _)| keep(n)).map(|(_, t)| t.len()).sum()
    }

    /// Tensor for `spec`, checked against its expected shape.
    pub fn require(&self, layer: &str, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name).ok_or_else(|| Error::MissingWeight {
            layer: layer.into(),
            name: name.into(),
        })?;
        if t.shape() != shape {
            return Err(Error::WeightShape {
                layer: layer.into(),
                name: name.into(),
                expected: shape.to_vec(),
                actual: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    /// Checks that every tensor `graph` needs is present with the right shape.
    pub fn check_against(&self, graph: &NetGraph, input: &[usize]) -> Result<Vec<ParamSpec>> {
        let specs = param_specs(graph, input)?;
        for s in &specs {
            self.require(&s.layer, &s.name, &s.shape)?;
        }
        Ok(specs)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: usize = self.tensors.iter().map(|(n, t)| 3 + n.len() + 4 * t.rank() + 4 * t.len()).sum();
        let mut out = Vec::with_capacity(16 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| WeightFileError::NameTooLong(name.clone()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightFileError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(WeightFileError::BadMagic { found: magic });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(WeightFileError::UnsupportedVersion(version));
        }
        // Walk the structure first so truncation is told apart from corruption.
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = r.take(name_len)?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or(WeightFileError::Truncated {
                    needed: usize::MAX,
                    available: bytes.len(),
                })?;
            let data = r.take(n)?;
            entries.push((name, dims, data));
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(WeightFileError::TrailingBytes(bytes.len() - r.pos));
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(WeightFileError::CrcMismatch { stored, computed });
        }

        let mut store = WeightStore::new();
        for (name, dims, data) in entries {
            let name = std::str::from_utf8(name).map_err(|_| WeightFileError::InvalidName)?;
            let floats = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(dims.clone(), floats).map_err(|_| WeightFileError::InvalidDims {
                name: name.into(),
                dims,
            })?;
            if store.tensors.insert(name.to_string(), t).is_some() {
                return Err(WeightFileError::DuplicateName(name.into()));
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightFileError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            WeightFileError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.bytes.len(),
            },
        )?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("a.weight", Tensor::from_fn(vec![3, 3, 1, 2], |i| i as f32 * -0.5)).unwrap();
        s.insert("a.bias", Tensor::vector(vec![f32::MIN_POSITIVE, -0.0, 1e30])).unwrap();
        s
    }

    // 12 header bytes of an empty store followed by their CRC-32, which was
    // computed separately with zlib.crc32(b"WLDW\x01\0\0\0\0\0\0\0").
    const EMPTY_FILE: [u8; 16] = [
        b'W', b'L', b'D', b'W', 1, 0, 0, 0, 0, 0, 0, 0, 0x3f, 0x75, 0xac, 0xa2,
    ];

    #[test]
    fn empty_store_golden_bytes() {
        let bytes = WeightStore::new().to_bytes().unwrap();
        assert_eq!(bytes, EMPTY_FILE);
        assert!(WeightStore::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let back = WeightStore::from_bytes(&s.to_bytes().unwrap()).unwrap();
        for ((n1, t1), (n2, t2)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightStore::from_bytes(&bad), Err(WeightFileError::BadMagic { .. })));

        let mut flipped = bytes.clone();
        let last_float = bytes.len() - 5;
        flipped[last_float] ^= 0x10;
        assert!(matches!(
            WeightStore::from_bytes(&flipped),
            Err(WeightFileError::CrcMismatch { .. })
        ));

        assert!(matches!(
            WeightStore::from_bytes(&bytes[..bytes.len() - 9]),
            Err(WeightFileError::Truncated { .. })
        ));

        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(WeightStore::from_bytes(&longer), Err(WeightFileError::TrailingBytes(1))));

        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(WeightStore::from_bytes(&v2), Err(WeightFileError::UnsupportedVersion(2))));
    }

    #[test]
    fn duplicate_insert_rejected() {
        let mut s = sample();
        assert!(s.insert("a.bias", Tensor::zeros(vec![1])).is_err());
    }
}
