//! Named parameter storage and the binary parameter container.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "URVPARAM"
//! version  u32       1
//! meta     u32 len + UTF-8 bytes (free-form record, e.g. a JSON config; may be empty)
//! count    u32       number of tensors
//! tensor   u32 name len + UTF-8 name
//!          u32 rank, rank × u64 extents
//!          product(extents) × f64 payload
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 8] = b"URVPARAM";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a parameter container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("malformed container: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (n, v) in self.names.iter().zip(&mut self.values) {
            if n.starts_with(prefix) {
                v.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn write_to(&self, meta: &str, w: &mut impl Write) -> Result<(), ContainerError> {
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        write_str(w, meta)?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, value) in self.names.iter().zip(&self.values) {
            write_str(w, name)?;
            w.write_all(&(value.rank() as u32).to_le_bytes())?;
            for &e in value.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(value.len() * 8);
            for x in value.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads a container, returning the store and its metadata record.
    pub fn read_from(r: &mut impl Read) -> Result<(Self, String), ContainerError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CONTAINER_MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != CONTAINER_VERSION {
            return Err(ContainerError::Version(version));
        }
        let meta = read_str(r)?;
        let count = read_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = read_str(r)?;
            let rank = read_u32(r)? as usize;
            if rank > 16 {
                return Err(ContainerError::Malformed(format!("rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(truncated)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(truncated)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| ContainerError::Malformed(format!("{name}: {e}")))?;
            if store.find(&name).is_some() {
                return Err(ContainerError::Malformed(format!("duplicate tensor {name}")));
            }
            store.add(name, t);
        }
        Ok((store, meta))
    }

    pub fn save(&self, meta: &str, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let mut buf = Vec::new();
        self.write_to(meta, &mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String), ContainerError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn truncated(e: io::Error) -> ContainerError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        ContainerError::Malformed("truncated".into())
    } else {
        ContainerError::Io(e)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32, ContainerError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String, ContainerError> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|e| ContainerError::Malformed(e.to_string()))
}

/// Glorot-uniform sample: U(−a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, data).expect("glorot shape")
}
