//! Named weight container and its binary format.
//!
//! Layout, all integers little-endian, no padding:
//!
//! ```text
//! "RWT1"                      4-byte magic
//! u32                         tensor count
//! per tensor:
//!   u16  name length, then that many UTF-8 bytes
//!   u8   rank, then rank × u32 dims
//!   product(dims) × f32       row-major, last dim fastest
//! ```
//!
//! Tensors are written in name order, so equal stores encode to equal bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RWT1";

#[derive(Clone, Debug, PartialEq)]
pub struct StoredArray {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredArray {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape("stored array length", len, data.len()));
        }
        Ok(StoredArray { dims, data })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, StoredArray>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: StoredArray) -> Option<StoredArray> {
        self.entries.insert(name.into(), array)
    }

    pub fn get(&self, name: &str) -> Option<&StoredArray> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut StoredArray> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<StoredArray> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredArray)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::Validation("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, arr) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Validation(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(arr.dims.len())
                .map_err(|_| Error::Validation(format!("rank of {name} exceeds 255")))?;
            out.push(rank);
            for &d in &arr.dims {
                let d = u32::try_from(d).map_err(|_| Error::Validation(format!("dim of {name} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &arr.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a whole container; nothing is returned unless every byte checks out.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {:?}, expected \"RWT1\"", String::from_utf8_lossy(magic)),
            });
        }
        let count = r.u32("tensor count")?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    offset: at + 2,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dim")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format {
                    offset: r.pos as u64,
                    msg: format!("dims of {name} overflow"),
                })?;
            let raw = r.take(
                numel.checked_mul(4).ok_or_else(|| Error::Format {
                    offset: r.pos as u64,
                    msg: format!("size of {name} overflows"),
                })?,
                "tensor data",
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if entries.insert(name.clone(), StoredArray { dims, data }).is_some() {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("duplicate tensor {name}"),
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(WeightStore { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.encode()?)?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("a.w", StoredArray::new(vec![2, 1, 1, 1], vec![1.5, -2.0]).unwrap());
        s.insert("a.bn.gamma", StoredArray::new(vec![2], vec![1.0, f32::MIN_POSITIVE]).unwrap());
        s
    }

    #[test]
    fn exact_layout() {
        let mut s = WeightStore::new();
        s.insert("x", StoredArray::new(vec![1], vec![1.0]).unwrap());
        let bytes = s.encode().unwrap();
        let expect: Vec<u8> = [
            b"RWT1".as_slice(),
            &1u32.to_le_bytes(),
            &1u16.to_le_bytes(),
            b"x",
            &[1u8],
            &1u32.to_le_bytes(),
            &1.0f32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(bytes, expect);
    }

    #[test]
    fn round_trip() {
        let s = sample();
        assert_eq!(WeightStore::decode(&s.encode().unwrap()).unwrap(), s);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().encode().unwrap();
        bytes[0] = b'X';
        assert!(matches!(WeightStore::decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_reports_offset() {
        let bytes = sample().encode().unwrap();
        let cut = bytes.len() - 3;
        match WeightStore::decode(&bytes[..cut]) {
            Err(Error::Format { offset, msg }) => {
                assert!(offset as usize <= cut);
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().encode().unwrap();
        bytes.push(0);
        assert!(matches!(WeightStore::decode(&bytes), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn arbitrary_stores_round_trip_bit_exact(
            tensors in prop::collection::btree_map(
                "[a-z][a-z0-9_.]{0,12}",
                prop::collection::vec(any::<u32>(), 0..12),
                0..6,
            )
        ) {
            let mut s = WeightStore::new();
            for (name, bits) in &tensors {
                let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
                s.insert(name.clone(), StoredArray::new(vec![1, data.len()], data).unwrap());
            }
            let back = WeightStore::decode(&s.encode().unwrap()).unwrap();
            prop_assert_eq!(back.len(), s.len());
            for ((n1, a), (n2, b)) in s.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(&a.dims, &b.dims);
                let abits: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
                let bbits: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(abits, bbits);
            }
        }
    }
}
