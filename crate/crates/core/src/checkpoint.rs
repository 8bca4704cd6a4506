//! Checkpoint bundles: a JSON manifest next to one tensor archive per
//! parameter store.
//!
//! Archive layout (all integers little-endian):
//! `"IWMT" | version u32 | count u32 | { name_len u32 | name | dtype u8 |
//! ndim u32 | dims u64* | data }*`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use iwm_tensor::{DType, ParamStore, Scalar, Tensor};

use crate::error::{io_err, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"IWMT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub configs: serde_json::Value,
    pub metrics: serde_json::Value,
    /// Archive name -> sha256 of its bytes.
    pub hashes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub step: u64,
    pub configs: serde_json::Value,
    pub metrics: serde_json::Value,
    pub stores: BTreeMap<String, ParamStore<f32>>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a store's names, shapes and values, for frozen-weight checks.
pub fn store_hash(store: &ParamStore<f32>) -> String {
    sha256_hex(&encode_archive(store))
}

pub fn encode_archive<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match T::DTYPE {
            DType::F32 => 0,
            DType::F64 => 1,
        });
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Corrupt(format!("archive truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_archive<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Corrupt("bad archive magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("tensor name is not utf-8".into()))?
            .to_string();
        let dtype = match r.take(1)?[0] {
            0 => DType::F32,
            1 => DType::F64,
            d => return Err(Error::Corrupt(format!("unknown dtype tag {d}"))),
        };
        if dtype != T::DTYPE {
            return Err(Error::Corrupt(format!("{name}: stored as {}, expected {}", dtype.name(), T::DTYPE.name())));
        }
        let nd = r.u32()? as usize;
        let mut shape = Vec::with_capacity(nd);
        for _ in 0..nd {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let size = T::DTYPE.size_of();
        let raw = r.take(n.checked_mul(size).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("{name}: {e}")))?;
        store.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt("trailing bytes after archive".into()));
    }
    Ok(store)
}

fn archive_file(name: &str) -> String {
    format!("{name}.iwmt")
}

pub fn save_checkpoint(bundle: &CheckpointBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut hashes = BTreeMap::new();
    for (name, store) in &bundle.stores {
        let bytes = encode_archive(store);
        hashes.insert(name.clone(), sha256_hex(&bytes));
        let path = dir.join(archive_file(name));
        std::fs::write(&path, &bytes).map_err(io_err(&path))?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step: bundle.step,
        configs: bundle.configs.clone(),
        metrics: bundle.metrics.clone(),
        hashes,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn load_checkpoint(dir: &Path) -> Result<CheckpointBundle> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Corrupt("manifest lacks format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    let mut stores = BTreeMap::new();
    for (name, hash) in &manifest.hashes {
        let p = dir.join(archive_file(name));
        let bytes = std::fs::read(&p).map_err(io_err(&p))?;
        if &sha256_hex(&bytes) != hash {
            return Err(Error::Corrupt(format!("{}: hash mismatch", p.display())));
        }
        stores.insert(name.clone(), decode_archive(&bytes)?);
    }
    Ok(CheckpointBundle {
        step: manifest.step,
        configs: manifest.configs,
        metrics: manifest.metrics,
        stores,
    })
}
