//! Checkpoint files: a JSON header naming every array, followed by the raw
//! little-endian `f32` payload in header order.
//!
//! ```text
//! b"REFDETCK" | u32 version | u64 header length | header JSON | payload
//! ```
//!
//! Array names are the detector's parameter names (`backbone/…`, `fpn/…`,
//! `rpn/…`, `roi/…`, and `ptg/…` for generator weights), so a checkpoint is
//! readable without this crate.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use refdet_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"REFDETCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Training fingerprint of the config that produced the weights.
    pub fingerprint: String,
    /// The resolved config, as TOML.
    pub config: String,
    pub code_version: String,
    pub epoch: usize,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    arrays: Vec<ArrayEntry>,
}

/// Named arrays read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(meta: CheckpointMeta, store: &ParamStore) -> Self {
        Self {
            meta,
            arrays: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Writes atomically: a temporary sibling is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let io = |e| Error::io(&tmp, e);
        let header = Header {
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(n, t)| ArrayEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
            w.write_all(MAGIC).map_err(io)?;
            w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
            w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&json).map_err(io)?;
            for (_, t) in &self.arrays {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
            w.flush().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| bad(format!("truncated file ({e})")));
        let mut magic = [0u8; 8];
        read(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let mut v4 = [0u8; 4];
        read(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut v8 = [0u8; 8];
        read(&mut v8)?;
        let len = u64::from_le_bytes(v8) as usize;
        let mut json = vec![0u8; len];
        read(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in header.arrays {
            let n: usize = a.shape.iter().product();
            let mut bytes = vec![0u8; 4 * n];
            read(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(&a.shape, data).map_err(|e| bad(e.to_string()))?;
            arrays.push((a.name, t));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(bad("trailing bytes after payload".into()));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    /// Copies every array into `store`. The name sets must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore, path: &Path) -> Result<()> {
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let missing: Vec<&str> = store
            .iter()
            .map(|(_, n, _)| n)
            .filter(|n| !self.arrays.iter().any(|(m, _)| m == n))
            .collect();
        if !missing.is_empty() {
            return Err(bad(format!("missing arrays: {}", missing.join(", "))));
        }
        for (name, t) in &self.arrays {
            if store.get(name).is_none() {
                return Err(bad(format!(
                    "unexpected array `{name}` (model built with a different architecture)"
                )));
            }
            store
                .assign(name, t.clone())
                .map_err(|e| bad(format!("`{name}`: {e}")))?;
        }
        Ok(())
    }
}
