//! Named parameter storage, initialization and checkpoint files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"MGRAPHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    pub(crate) moments: BTreeMap<String, Moments>,
    pub(crate) step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.values.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::numel).sum()
    }

    /// Number of optimizer steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Layout: magic, `u32` version, `u32` count, then per entry a
    /// length-prefixed UTF-8 name, `u32` rank, `u64` dims and `f64` values,
    /// all little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, t) in &self.values {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        fn bad(e: std::io::Error) -> Error {
            Error::Checkpoint(format!("truncated or unreadable: {e}"))
        }
        fn u32_le(r: &mut impl Read) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(bad)?;
            Ok(u32::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32_le(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = u32_le(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = u32_le(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(bad)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = u32_le(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(bad)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw).map_err(bad)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store
                .insert(name, Tensor::new(shape, data)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(store)
    }

    /// Errors unless `other` holds exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.values {
            let o = other
                .values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?;
            if o.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    o.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = other.values.keys().find(|k| !self.values.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected `{extra}`")));
        }
        Ok(())
    }
}

/// Draws weights uniformly in `[-1/√fan_in, 1/√fan_in]`.
#[derive(Debug)]
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::raw(shape.to_vec(), data)
    }
}
