//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PVT2"                 4 bytes
//! version                u32
//! entry count            u64
//! per entry:
//!   path length          u32
//!   path                 UTF-8 bytes
//!   dtype tag            u8   (0 = f32, 1 = f64)
//!   rank                 u32
//!   extents              u64 × rank
//!   data                 numel × dtype size, little-endian
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"PVT2";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum WeightData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl WeightData {
    pub fn dtype(&self) -> DType {
        match self {
            WeightData::F32(_) => DType::F32,
            WeightData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            WeightData::F32(v) => v.len(),
            WeightData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        // f32 -> f64 -> f32 is exact, so both branches preserve every bit.
        match T::DTYPE {
            DType::F32 => WeightData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => WeightData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        }
    }

    fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        match self {
            WeightData::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            WeightData::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: WeightData,
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<WeightEntry>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, path: &str) -> Option<&WeightEntry> {
        self.entries.iter().find(|e| e.path == path)
    }

    pub fn push(&mut self, path: impl Into<String>, shape: &[usize], data: WeightData) -> Result<()> {
        let path = path.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "{path}: shape {shape:?} needs {numel} elements, data has {}",
                data.len()
            )));
        }
        if self.get(&path).is_some() {
            return Err(Error::Corrupt(format!("duplicate path `{path}`")));
        }
        self.entries.push(WeightEntry {
            path,
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn push_tensor<T: Scalar>(&mut self, path: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        self.push(path, t.shape(), WeightData::from_tensor(t))
    }

    /// Snapshot of every parameter, in visiting order.
    pub fn from_module<T: Scalar>(module: &impl Module<T>) -> Result<Self> {
        let mut store = WeightStore::new();
        let mut err = None;
        module.visit(&mut |name, t| {
            if err.is_none() {
                err = store.push_tensor(name, t).err();
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(store),
        }
    }

    /// Copies every entry into the matching parameter. Nothing is written
    /// unless paths, shapes and dtypes all agree; otherwise every mismatch is
    /// reported.
    pub fn load_into<T: Scalar>(&self, module: &mut impl Module<T>) -> Result<()> {
        let by_path: HashMap<&str, &WeightEntry> = self.entries.iter().map(|e| (e.path.as_str(), e)).collect();
        let mut problems = Vec::new();
        let mut seen = HashSet::new();
        module.visit(&mut |name, t| {
            seen.insert(name.to_string());
            match by_path.get(name) {
                None => problems.push(format!("{name}: missing from weight store")),
                Some(e) if e.shape != t.shape() => problems.push(format!(
                    "{name}: shape {:?} in store, model expects {:?}",
                    e.shape,
                    t.shape()
                )),
                Some(e) if e.data.dtype() != T::DTYPE => problems.push(format!(
                    "{name}: dtype {} in store, model uses {}",
                    e.data.dtype(),
                    T::DTYPE
                )),
                Some(_) => {}
            }
        });
        for e in &self.entries {
            if !seen.contains(&e.path) {
                problems.push(format!("{}: not a parameter of this model", e.path));
            }
        }
        if !problems.is_empty() {
            return Err(Error::WeightMismatch(problems));
        }
        module.visit_mut(&mut |name, t| {
            let e = by_path[name];
            *t = Tensor::from_vec(&e.shape, e.data.to_scalars()).expect("shape checked above");
        });
        Ok(())
    }
}

pub fn encode_weights(store: &WeightStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.entries.len() as u64).to_le_bytes());
    for e in &store.entries {
        out.extend_from_slice(&(e.path.len() as u32).to_le_bytes());
        out.extend_from_slice(e.path.as_bytes());
        out.push(e.data.dtype().tag());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &e.data {
            WeightData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            WeightData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::Corrupt(format!(
                "truncated at byte {}: {what} needs {n} bytes, {remaining} left",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Corrupt(format!("{what} {v} does not fit in memory")))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightStore> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        let found = &bytes[..bytes.len().min(4)];
        return Err(Error::Format {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let count = r.u64("entry count")?;
    let mut store = WeightStore::new();
    for i in 0..count {
        let len = r.u32("path length")? as usize;
        let path = std::str::from_utf8(r.take(len, "path")?)
            .map_err(|_| Error::Corrupt(format!("entry {i}: path is not UTF-8")))?
            .to_string();
        let tag = r.u8("dtype tag")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Corrupt(format!("{path}: unknown dtype tag {tag}")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::new();
        for _ in 0..rank {
            shape.push(r.usize("extent")?);
        }
        let nbytes = shape
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corrupt(format!("{path}: shape {shape:?} overflows")))?;
        let raw = r.take(nbytes, &path)?;
        let data = match dtype {
            DType::F32 => WeightData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => WeightData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        store.push(path, &shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after {count} entries",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

/// Writes `store` to `path` and returns the number of bytes written.
pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_weights(store);
    fs::write(path, &bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(bytes.len() as u64)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_entry() -> WeightStore {
        let mut s = WeightStore::new();
        s.push("w", &[2, 2], WeightData::F32(vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE]))
            .unwrap();
        s
    }

    #[test]
    fn header_only() {
        assert_eq!(encode_weights(&WeightStore::new()).len(), 16);
    }

    #[test]
    fn single_entry_size() {
        // 16 header + 4 + 1 path + 1 tag + 4 rank + 2·8 extents + 16 data
        assert_eq!(encode_weights(&one_entry()).len(), 58);
    }

    #[test]
    fn round_trip() {
        let s = one_entry();
        assert_eq!(decode_weights(&encode_weights(&s)).unwrap(), s);
    }

    #[test]
    fn bad_magic() {
        let mut b = encode_weights(&one_entry());
        b[..4].copy_from_slice(b"XXXX");
        match decode_weights(&b) {
            Err(Error::Format { expected, found }) => {
                assert_eq!(expected, "PVT2");
                assert_eq!(found, "XXXX");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_and_trailing() {
        let b = encode_weights(&one_entry());
        assert!(matches!(decode_weights(&b[..b.len() - 4]), Err(Error::Corrupt(_))));
        let mut longer = b.clone();
        longer.push(0);
        assert!(matches!(decode_weights(&longer), Err(Error::Corrupt(_))));
    }

    #[test]
    fn unknown_version() {
        let mut b = encode_weights(&one_entry());
        b[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_weights(&b),
            Err(Error::Version { found: 7, supported: 1 })
        ));
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut s = one_entry();
        assert!(s.push("w", &[1], WeightData::F64(vec![0.0])).is_err());
    }
}
