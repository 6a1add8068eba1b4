//! Single-file checkpoint format.
//!
//! ```text
//! MAGIC (8 bytes, "TRJCKPT1")
//! header length (u64, little endian)
//! header (UTF-8 JSON)
//! tensor data (f64, little endian, concatenated in header order)
//! ```
//!
//! The header is `{"version":1,"meta":{..},"tensors":{name:{"shape":[r,c],
//! "dtype":"f64","offset":bytes}}}` with offsets relative to the start of
//! the data section. Tensor names are sorted, so identical contents always
//! serialize to identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TRJCKPT1";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: [usize; 2],
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: BTreeMap<String, Entry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                Entry {
                    shape: t.shape(),
                    dtype: "f64".to_string(),
                    offset,
                },
            );
            offset += 8 * t.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| NumericsError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic string"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        if header.version != VERSION {
            return Err(NumericsError::Checkpoint(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let data = &bytes[data_start..];
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            if e.dtype != "f64" {
                return Err(NumericsError::Checkpoint(format!(
                    "`{name}` has dtype {}",
                    e.dtype
                )));
            }
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > data.len() {
                return Err(NumericsError::Checkpoint(format!("`{name}` truncated")));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(e.shape[0], e.shape[1], values)?);
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = Checkpoint {
            meta: serde_json::json!({"step": 3, "t_f": 30}),
            ..Default::default()
        };
        c.tensors.insert("b/w".into(), Tensor::from_fn(2, 3, |r, c| r as f64 * 0.1 - c as f64));
        c.tensors.insert("a".into(), Tensor::scalar(-0.0));
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
        let mut bytes = Checkpoint::default().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
