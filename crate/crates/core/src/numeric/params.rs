//! Named trainable parameters, their gradient buffers, SGD, and the binary
//! archive format.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! magic  b"QLPARAMS"
//! u32    format version
//! u32    entry count
//! repeat:
//!   u32  path length, then UTF-8 path bytes
//!   u32  rank, then rank × u64 extents
//!   product(extents) × f64 values
//! ```
//!
//! A text index (`<archive>.txt`) lists `path shape count` per entry.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;

use super::tensor::Tensor;
use crate::error::{Error, IoContext, Result};
use crate::rng::Rng;

const MAGIC: &[u8; 8] = b"QLPARAMS";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters never receive gradient and are skipped by SGD.
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            path.into(),
            Param {
                value,
                grad,
                frozen: false,
            },
        );
    }

    /// Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)).
    pub fn insert_glorot(
        &mut self,
        path: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.insert(path, Tensor::from_vec(shape, data).expect("sized"));
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Result<&Param> {
        self.params
            .get(path)
            .ok_or_else(|| Error::State(format!("missing parameter `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::State(format!("missing parameter `{path}`")))
    }

    pub fn value(&self, path: &str) -> Result<&Tensor> {
        Ok(&self.get(path)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Mark every parameter whose path starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.frozen = true;
            }
        }
    }

    /// Copy parameters under `prefix` from another store (shapes must match).
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for (k, src) in other.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let dst = self.get_mut(k)?;
            if dst.value.shape() != src.value.shape() {
                return Err(Error::State(format!("shape mismatch copying `{k}`")));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Keep only the parameters under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Plain SGD: θ ← θ − lr·∇θ for every trainable parameter, then zero all
    /// gradients. Nothing is updated if any gradient is non-finite.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if let Some((k, _)) = self
            .params
            .iter()
            .find(|(_, p)| !p.frozen && !p.grad.all_finite())
        {
            return Err(Error::Divergence(k.clone()));
        }
        for p in self.params.values_mut() {
            if !p.frozen {
                for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *v -= lr * g;
                }
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (path, p) in &self.params {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Archive(format!("unsupported archive version {version}")));
        }
        let n = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let path = String::from_utf8(name).map_err(|_| Error::Archive("non-UTF-8 path".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let count: usize = shape.iter().product();
            if r.len() < count * 8 {
                return Err(Error::Archive(format!("truncated values for `{path}`")));
            }
            let data = r[..count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[count * 8..];
            store.insert(path, Tensor::from_vec(&shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Archive("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn index_text(&self) -> String {
        let mut s = format!("# quantlab params v{ARCHIVE_VERSION}\n");
        for (path, p) in &self.params {
            s.push_str(&format!("{path} {:?} {}\n", p.value.shape(), p.value.len()));
        }
        s
    }

    /// Write the archive and its text index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(&self.to_bytes()).at(path)?;
        let idx = index_path(path);
        std::fs::write(&idx, self.index_text()).at(idx)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .at(path)?;
        ParamStore::from_bytes(&bytes)
    }
}

pub fn index_path(archive: &Path) -> PathBuf {
    let mut s = archive.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Archive("truncated archive".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
