//! Named parameter storage and the binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SKTUNCKP"
//! version  u32
//! kind     u32 length + UTF-8
//! config   u32 length + UTF-8 (TOML)
//! count    u32
//! count x { name: u32 length + UTF-8, rank: u32, dims: rank x u64, data: f64 x prod(dims) }
//! ```

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SKTUNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn set(&mut self, i: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.values[i].shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[i],
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.values.iter().map(|v| v.as_ref())
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// One [`Var`] per parameter: gradient-receiving leaves when
    /// `trainable`, constants otherwise.
    pub fn vars<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf_arc(v.clone())
                } else {
                    tape.constant_arc(v.clone())
                }
            })
            .collect()
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(format!("invalid UTF-8 in checkpoint: {e}")))
}

/// Raw checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        put_str(w, &self.kind)?;
        put_str(w, &self.config)?;
        put_u32(w, self.params.len() as u32)?;
        for (name, t) in self.params.names.iter().zip(&self.params.values) {
            put_str(w, name)?;
            put_u32(w, t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        Self::read_inner(r).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
                Error::Format("truncated checkpoint".into())
            }
            other => other,
        })
    }

    fn read_inner(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let kind = get_str(r)?;
        let config = get_str(r)?;
        let count = get_u32(r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = get_str(r)?;
            let rank = get_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| get_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(name, Tensor::new(&shape, data)?);
        }
        Ok(Checkpoint {
            kind,
            config,
            params,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(&mut bytes.as_slice())
    }
}
