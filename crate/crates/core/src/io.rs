//! Checkpoint container: named f32 arrays in a little-endian binary file.
//!
//! Layout: magic `MKD1`, u32 version, u32 array count, then per array a u16
//! name length, the UTF-8 name, a u8 dtype code (0 = f32), a u8 rank,
//! `rank` u64 dims and the raw f32 data.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MKD1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered collection of uniquely named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    arrays: Vec<Array>,
    names: HashSet<String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if name.len() > u16::MAX as usize {
            bail!(Checkpoint, "array name of {} bytes is too long", name.len());
        }
        if shape.len() > u8::MAX as usize {
            bail!(Checkpoint, "array {name}: rank {} is too large", shape.len());
        }
        if shape.iter().product::<usize>() != data.len() {
            bail!(Checkpoint, "array {name}: shape {shape:?} does not match {} values", data.len());
        }
        if !self.names.insert(name.to_string()) {
            bail!(Checkpoint, "duplicate array name {name:?}");
        }
        self.arrays.push(Array {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(())
    }

    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        if !self.names.contains(name) {
            return None;
        }
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        let mut c = Self::new();
        for (_, p) in store.iter() {
            let v = p.value();
            c.push(
                &p.name,
                v.shape().to_vec(),
                v.data().iter().map(|x| x.as_f64() as f32).collect(),
            )?;
        }
        Ok(c)
    }

    /// Overwrites every parameter of `store` from the array of the same name.
    /// The checkpoint must hold exactly the store's parameters.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.len() != store.len() {
            bail!(
                Checkpoint,
                "checkpoint holds {} arrays but the model has {} parameters",
                self.len(),
                store.len()
            );
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let Some(a) = self.get(&name) else {
                bail!(Checkpoint, "checkpoint has no array named {name:?}");
            };
            if a.shape != store.value(id).shape() {
                bail!(
                    Checkpoint,
                    "array {name}: checkpoint shape {:?} differs from model shape {:?}",
                    a.shape,
                    store.value(id).shape()
                );
            }
            let t = Tensor::new(a.shape.clone(), a.data.iter().map(|&x| T::lit(f64::from(x))).collect())?;
            store.set_value(id, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            bail!(Checkpoint, "not a checkpoint file (bad magic)");
        }
        let version = r.u32()?;
        if version != VERSION {
            bail!(Checkpoint, "unsupported checkpoint version {version}");
        }
        let count = r.u32()? as usize;
        let mut c = Self::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                bail!(Checkpoint, "array {name}: unsupported dtype code {dtype}");
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint(format!("array {name}: dimension overflows")))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("array {name}: size overflows")))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflows".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            c.push(&name, shape, data)?;
        }
        if r.pos != bytes.len() {
            bail!(Checkpoint, "{} trailing bytes after the last array", bytes.len() - r.pos);
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_of_one_array() {
        let mut c = Checkpoint::new();
        c.push("w", vec![2], vec![1.0, -2.0]).unwrap();
        let b = c.to_bytes();
        let mut expected = b"MKD1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u16.to_le_bytes());
        expected.push(b'w');
        expected.extend([0u8, 1u8]);
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(b, expected);
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut c = Checkpoint::new();
        c.push("a", vec![1, 1], vec![3.0]).unwrap();
        assert!(c.push("a", vec![1], vec![1.0]).is_err());
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn store_round_trip() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add_uniform("w", &[3, 2], 3, &mut crate::seed::rng(0)).unwrap();
        s.add_zeros("b", &[2]).unwrap();
        let c = Checkpoint::from_store(&s).unwrap();
        let mut t = ParamStore::<f32>::new();
        t.add_zeros("w", &[3, 2]).unwrap();
        t.add_zeros("b", &[2]).unwrap();
        c.load_into(&mut t).unwrap();
        assert_eq!(t.value(id), s.value(id));
        let mut wrong = ParamStore::<f32>::new();
        wrong.add_zeros("w", &[2, 3]).unwrap();
        wrong.add_zeros("b", &[2]).unwrap();
        assert!(c.load_into(&mut wrong).is_err());
    }
}
