//! Named parameter store and its on-disk checkpoint format.
//!
//! Format `LFT1`, all integers little-endian:
//!
//!   magic  b"LFT1"
//!   repeat until EOF:
//!     u32  name length
//!     [u8] name (UTF-8)
//!     u32  shape rank
//!     u64  extent, per rank
//!     f64  raw data, product-of-extents values

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::TensorError;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LFT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of named parameters. Order is part of the identity:
/// optimizer state and graph bindings index into it positionally.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.value.rank() as u32).to_le_bytes())?;
            for &ext in e.value.shape() {
                w.write_all(&(ext as u64).to_le_bytes())?;
            }
            for &v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore, TensorError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::BadCheckpoint {
                what: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let mut store = ParamStore::new();
        loop {
            let mut lenb = [0u8; 4];
            match r.read_exact(&mut lenb) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(lenb) as usize;
            if name_len > 4096 {
                return Err(TensorError::BadCheckpoint {
                    what: format!("implausible name length {name_len}"),
                });
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| TensorError::BadCheckpoint {
                what: "parameter name is not UTF-8".to_string(),
            })?;
            let mut rankb = [0u8; 4];
            r.read_exact(&mut rankb)?;
            let rank = u32::from_le_bytes(rankb) as usize;
            if rank > 8 {
                return Err(TensorError::BadCheckpoint {
                    what: format!("implausible rank {rank} for {name}"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut extb = [0u8; 8];
                r.read_exact(&mut extb)?;
                shape.push(u64::from_le_bytes(extb) as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > (1 << 28) {
                return Err(TensorError::BadCheckpoint {
                    what: format!("implausible extent product {numel} for {name}"),
                });
            }
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.add(name, Tensor::new(&shape, data)?);
        }
        Ok(store)
    }
}

/// 64-bit FNV-1a over a byte stream; used to tie bitstreams to the
/// checkpoint that produced them.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn hash_file(path: &Path) -> Result<u64, TensorError> {
    let bytes = std::fs::read(path)?;
    Ok(fnv1a64(&bytes))
}
