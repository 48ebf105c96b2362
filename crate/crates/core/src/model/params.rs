//! Named parameter table with deterministic initialization and a
//! checksummed `.pfck` checkpoint format.
//!
//! Every tensor's initializer stream is derived only from `(seed, name)`, so
//! adding or removing other parameter groups (for example when toggling an
//! ablation head) never shifts anyone else's initial values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("unknown parameter {0}")]
    Unknown(String),
    #[error("duplicate parameter {0}")]
    Duplicate(String),
    #[error("parameter {name}: {count} values for shape {shape:?}")]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        count: usize,
    },
    #[error("non-finite value in parameter {0}")]
    NonFinite(String),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("checkpoint truncated at byte {offset}, needed {needed} more")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("{0} trailing bytes after checkpoint payload")]
    TrailingBytes(usize),
    #[error("parameter name is not valid UTF-8")]
    BadName,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    /// `false` marks state buffers (e.g. normalization running statistics)
    /// that are checkpointed but never touched by the optimizer.
    pub trainable: bool,
}

/// Parameters keyed by hierarchical name (`"encoder.conv0.weight"`), iterated
/// in name order everywhere so downstream folds are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        shape: &[usize],
        values: Vec<f32>,
        trainable: bool,
    ) -> Result<(), ParamError> {
        if self.params.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        if values.len() != shape.iter().product::<usize>() {
            return Err(ParamError::LengthMismatch {
                name: name.to_string(),
                shape: shape.to_vec(),
                count: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ParamError::NonFinite(name.to_string()));
        }
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                values,
                trainable,
            },
        );
        Ok(())
    }

    /// Trainable tensor drawn uniform(-b, b) with `b = 1/sqrt(fan_in)` from a
    /// ChaCha8 stream seeded by `(seed, name)` only.
    pub fn init_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        seed: u64,
    ) -> Result<(), ParamError> {
        assert!(fan_in > 0, "fan_in must be positive for {name}");
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(&[seed, seed::hash_str(name)]));
        let count = shape.iter().product();
        let values = (0..count)
            .map(|_| rng.gen_range(-bound..bound) as f32)
            .collect();
        self.insert(name, shape, values, true)
    }

    pub fn init_const(
        &mut self,
        name: &str,
        shape: &[usize],
        value: f32,
        trainable: bool,
    ) -> Result<(), ParamError> {
        let count = shape.iter().product();
        self.insert(name, shape, vec![value; count], trainable)
    }

    pub fn get(&self, name: &str) -> Result<&Param, ParamError> {
        self.params
            .get(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param, ParamError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((an, a), (bn, b))| {
                an == bn
                    && a.shape == b.shape
                    && a.trainable == b.trainable
                    && a.values.len() == b.values.len()
                    && a.values
                        .iter()
                        .zip(&b.values)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// `.pfck` layout: 16-byte header (magic, version u16, entry count u32,
    /// six reserved bytes), then per entry: name length u16 + UTF-8 name,
    /// trainable u8, rank u8, dims u32 each, f32 LE values; finally a SHA-256
    /// digest of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        out.extend_from_slice(&[0u8; 6]);
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.trainable as u8);
            out.push(p.shape.len() as u8);
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ParamError> {
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], ParamError> {
            if *off + n > bytes.len() {
                return Err(ParamError::Truncated {
                    offset: *off,
                    needed: *off + n - bytes.len(),
                });
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != CHECKPOINT_MAGIC {
            return Err(ParamError::BadMagic);
        }
        let version = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ParamError::BadVersion(version));
        }
        let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        take(&mut off, 6)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut off, name_len)?)
                .map_err(|_| ParamError::BadName)?
                .to_string();
            let trainable = take(&mut off, 1)?[0] != 0;
            let rank = take(&mut off, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
            }
            let value_count: usize = shape.iter().product();
            let raw = take(&mut off, value_count * 4)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            // Bypass insert's finiteness guard on purpose: a checkpoint is
            // trusted bytes and must roundtrip exactly.
            if store.params.contains_key(&name) {
                return Err(ParamError::Duplicate(name));
            }
            store.params.insert(
                name,
                Param {
                    shape,
                    values,
                    trainable,
                },
            );
        }
        let digest_start = off;
        let stored: [u8; 32] = take(&mut off, 32)?.try_into().unwrap();
        let computed: [u8; 32] = Sha256::digest(&bytes[..digest_start]).into();
        if stored != computed {
            return Err(ParamError::ChecksumMismatch);
        }
        if off != bytes.len() {
            return Err(ParamError::TrailingBytes(bytes.len() - off));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.init_uniform("net.lin.weight", &[4, 3], 3, 7).unwrap();
        s.init_const("net.lin.bias", &[4], 0.0, true).unwrap();
        s.init_const("net.bn.running_var", &[4], 1.0, false).unwrap();
        s
    }

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::new();
        a.init_uniform("w", &[8], 8, 3).unwrap();
        let mut b = ParamStore::new();
        b.init_uniform("other", &[100], 4, 3).unwrap();
        b.init_uniform("w", &[8], 8, 3).unwrap();
        assert_eq!(a.get("w").unwrap().values, b.get("w").unwrap().values);
        let mut c = ParamStore::new();
        c.init_uniform("w", &[8], 8, 4).unwrap();
        assert_ne!(a.get("w").unwrap().values, c.get("w").unwrap().values);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut s = ParamStore::new();
        s.init_uniform("w", &[1000], 16, 1).unwrap();
        let bound = (1.0f32 / 16.0).sqrt();
        assert!(s.get("w").unwrap().values.iter().all(|v| v.abs() < bound));
        // Not degenerate: spread over a decent portion of the range.
        let max = s.get("w").unwrap().values.iter().cloned().fold(0.0f32, f32::max);
        assert!(max > 0.5 * bound);
    }

    #[test]
    fn insert_validation() {
        let mut s = ParamStore::new();
        s.insert("a", &[2, 2], vec![0.0; 4], true).unwrap();
        assert!(matches!(
            s.insert("a", &[2], vec![0.0; 2], true),
            Err(ParamError::Duplicate(_))
        ));
        assert!(matches!(
            s.insert("b", &[3], vec![0.0; 4], true),
            Err(ParamError::LengthMismatch { .. })
        ));
        assert!(matches!(
            s.insert("c", &[1], vec![f32::NAN], true),
            Err(ParamError::NonFinite(_))
        ));
    }

    #[test]
    fn trainable_names_skip_buffers() {
        let s = sample_store();
        let names = s.trainable_names();
        assert_eq!(names, vec!["net.lin.bias", "net.lin.weight"]);
        assert_eq!(s.len(), 3);
        assert_eq!(s.total_values(), 12 + 4 + 4);
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let s = sample_store();
        let bytes = s.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert!(s.bit_eq(&back));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pfck");
        s.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert!(s.bit_eq(&loaded));
        assert_eq!(bytes, loaded.to_bytes());
    }

    #[test]
    fn checkpoint_detects_corruption() {
        let s = sample_store();
        let mut bytes = s.to_bytes();
        // Flip one payload bit (past the header, before the digest).
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            ParamStore::from_bytes(&bytes),
            Err(ParamError::ChecksumMismatch)
        ));

        let good = s.to_bytes();
        assert!(matches!(
            ParamStore::from_bytes(&good[..good.len() - 5]),
            Err(ParamError::Truncated { .. })
        ));

        let mut extended = s.to_bytes();
        extended.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(
            ParamStore::from_bytes(&extended),
            Err(ParamError::TrailingBytes(3))
        ));

        let mut wrong_magic = s.to_bytes();
        wrong_magic[0] = b'X';
        assert!(matches!(
            ParamStore::from_bytes(&wrong_magic),
            Err(ParamError::BadMagic)
        ));
    }
}
