//! Named parameter registry and the binary checkpoint format.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic   b"ATTNCKPT"
//! version u32 (= 1)
//! count   u32
//! count x { name_len u32, name utf-8, rank u32, extents u64 x rank, values f64 x prod(extents) }
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_u32, read_u64, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATTNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Parameter {
    name: String,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Ids whose names start with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.params
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            let shape = p.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(p.value.len() * 8);
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint into a fresh store, preserving file order.
    pub fn read_from(r: &mut impl Read, origin: &Path) -> Result<ParamStore> {
        let io = |e| Error::io(origin, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "not a parameter checkpoint"));
        }
        let version = read_u32(r).map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(r).map_err(io)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(r).map_err(io)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| Error::format(origin, "parameter name is not utf-8"))?;
            let rank = read_u32(r).map_err(io)? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::format(origin, format!("`{name}` has unsupported rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r).map_err(io)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(io)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = Tensor::new(&shape, data).map_err(|e| Error::format(origin, e.to_string()))?;
            store.add(name, value).map_err(|e| Error::format(origin, e.to_string()))?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file), path)
    }

    /// Overwrites values from `other`, requiring identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &self.params {
            match other.id(&p.name) {
                None => {
                    return Err(Error::CheckpointMismatch {
                        name: p.name.clone(),
                        expected: p.value.shape().to_vec(),
                        found: vec![],
                    })
                }
                Some(id) if other.value(id).shape() != p.value.shape() => {
                    return Err(Error::CheckpointMismatch {
                        name: p.name.clone(),
                        expected: p.value.shape().to_vec(),
                        found: other.value(id).shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.params.iter().find(|p| self.id(&p.name).is_none()) {
            return Err(Error::CheckpointMismatch {
                name: extra.name.clone(),
                expected: vec![],
                found: extra.value.shape().to_vec(),
            });
        }
        for p in &mut self.params {
            p.value = other.value(other.by_name[&p.name]).clone();
        }
        Ok(())
    }
}
