//! Named parameter store and its binary checkpoint format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic   b"ICAP"
//! version u16
//! count   u32
//! entry*  name_len u16, name (UTF-8), rank u8, dims (u32 × rank),
//!         data (f32 × product(dims))
//! ```
//!
//! Values are stored as f32; in-memory parameters are f64, so a round trip
//! loses at most one f32 ulp. Entries are written in sorted name order, which
//! makes `save → load → save` byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ICAP";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {found:?}, expected {MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    UnsupportedVersion { found: u16 },
    #[error("truncated checkpoint while reading {context}")]
    Truncated { context: &'static str },
    #[error("checkpoint has {count} trailing bytes after the last entry")]
    TrailingBytes { count: usize },
    #[error("entry name is not valid UTF-8")]
    InvalidName,
    #[error("parameter {name:?} contains a non-finite value")]
    NonFinite { name: String },
    #[error("duplicate parameter name {name:?}")]
    DuplicateName { name: String },
    #[error("parameter {name:?} declares an implausible element count {count}")]
    ImplausibleSize { name: String, count: u64 },
}

/// Named map of trainable tensors, iterated in sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    /// Insert a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }
}

/// Serialize a parameter store to the binary checkpoint format.
pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::with_capacity(16 + params.num_values() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { context });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16_le(&mut self, context: &'static str) -> Result<u16, CheckpointError> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, context: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Deserialize a checkpoint. Any malformed input fails without producing a
/// partial store.
pub fn load_checkpoint(path: &Path) -> Result<ParamStore, CheckpointError> {
    let bytes = fs::File::open(path).and_then(|mut f| {
        let mut v = Vec::new();
        f.read_to_end(&mut v)?;
        Ok(v)
    })?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: [magic[0], magic[1], magic[2], magic[3]] });
    }
    let version = r.u16_le("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let count = r.u32_le("entry count")?;

    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16_le("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| CheckpointError::InvalidName)?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let dim = r.u32_le("dims")? as u64;
            numel = numel.saturating_mul(dim);
            shape.push(dim as usize);
        }
        // guards against a corrupted shape table claiming absurd data lengths
        if numel == 0 || numel > (1 << 32) {
            return Err(CheckpointError::ImplausibleSize { name, count: numel });
        }
        let raw = r.take(numel as usize * 4, "tensor data")?;
        let mut data = Vec::with_capacity(numel as usize);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            if !v.is_finite() {
                return Err(CheckpointError::NonFinite { name });
            }
            data.push(v);
        }
        if store.get(&name).is_some() {
            return Err(CheckpointError::DuplicateName { name });
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|_| CheckpointError::Truncated { context: "tensor shape" })?;
        store.insert(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes { count: bytes.len() - r.pos });
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.insert(
            "stem.conv",
            Tensor::new(vec![2, 1, 3, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        store.insert(
            "head.w_dense",
            Tensor::new(vec![3, 8], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        store
    }

    #[test]
    fn round_trip_second_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.icap");
        let p2 = dir.path().join("b.icap");
        let store = sample_store();
        save_checkpoint(&store, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.len(), store.len());
        for (name, t) in store.iter() {
            assert_eq!(loaded.get(name).unwrap().shape(), t.shape());
        }
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn round_trip_relative_error_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.icap");
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut store = ParamStore::new();
        let values: Vec<f64> = (0..256)
            .map(|_| {
                let mag = 10f64.powf(rng.gen_range(-3.0..3.0));
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        store.insert("values", Tensor::from_vec(values.clone()));
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        for (orig, round) in values.iter().zip(loaded.get("values").unwrap().data()) {
            let rel = (orig - round).abs() / orig.abs();
            assert!(rel <= 2f64.powi(-20), "relative error {rel}");
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.icap");
        save_checkpoint(&sample_store(), &path).unwrap();
        let full = fs::read(&path).unwrap();
        for cut in [2, 5, 8, 20, full.len() - 3] {
            fs::write(&path, &full[..cut]).unwrap();
            let err = load_checkpoint(&path).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Truncated { .. }),
                "cut {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.icap");
        save_checkpoint(&sample_store(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        fs::write(&path, &wrong_magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic { .. })));

        bytes[4] = 9; // version low byte
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::UnsupportedVersion { found: 9 })
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.icap");
        save_checkpoint(&sample_store(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 1, 2]);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::TrailingBytes { count: 3 })
        ));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.icap");
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![1.0]));
        save_checkpoint(&store, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let data_off = bytes.len() - 4;
        bytes[data_off..].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::NonFinite { .. })));
    }
}
