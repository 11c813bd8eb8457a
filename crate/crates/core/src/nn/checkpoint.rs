//! Single-file parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PRGCKPT\0"
//! version  u32      1
//! hlen     u64      length of the JSON header in bytes
//! header   hlen     UTF-8 JSON: {kind, config, meta, arrays: [{name, shape, offset, len}]}
//! data     ...      f64 values, arrays concatenated in header order
//! ```
//!
//! `offset` and `len` count f64 elements from the start of the data section.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{join, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PRGCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl Archive {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Archive {
            kind: kind.to_string(),
            config,
            meta: serde_json::Value::Object(Default::default()),
            arrays: Vec::new(),
        }
    }

    pub fn add_params<P: Params + ?Sized>(&mut self, prefix: &str, p: &P) {
        p.visit(prefix, &mut |name, shape, data| {
            self.arrays.push(NamedArray {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        });
    }

    /// Copies every array under `prefix` into `p`; names and shapes must match exactly.
    pub fn load_into<P: Params + ?Sized>(&self, prefix: &str, p: &mut P) -> Result<()> {
        let index: HashMap<&str, &NamedArray> =
            self.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let mut err = None;
        let mut seen = 0usize;
        p.visit_mut(prefix, &mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            match index.get(name) {
                None => err = Some(Error::Validation(format!("checkpoint is missing array '{name}'"))),
                Some(a) if a.shape != shape => {
                    err = Some(Error::Validation(format!(
                        "array '{name}' has shape {:?}, expected {:?}",
                        a.shape, shape
                    )))
                }
                Some(a) => {
                    data.copy_from_slice(&a.data);
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let expected = self
            .arrays
            .iter()
            .filter(|a| prefix.is_empty() || a.name.starts_with(&join(prefix, "")))
            .count();
        if seen != expected {
            return Err(Error::Validation(format!(
                "checkpoint has {expected} arrays under '{prefix}', model consumed {seen}"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .arrays
            .iter()
            .map(|a| {
                let e = ArrayEntry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    offset,
                    len: a.data.len(),
                };
                offset += a.data.len();
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            arrays: entries,
        };
        let hjson = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + hjson.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for a in &self.arrays {
            for x in &a.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Validation(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(&format!("header: {e}")))?;
        let data = &bytes[hend..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(bad(&format!("array '{}' shape/len mismatch", e.name)));
            }
            let start = e.offset * 8;
            let end = start + e.len * 8;
            if end > data.len() {
                return Err(bad(&format!("array '{}' out of bounds", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data: values,
            });
        }
        Ok(Archive {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes the archive and returns its content hash.
    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(content_hash(&bytes))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}
