//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PICS"            4 bytes magic
//! version           u32
//! header_len        u64
//! header            header_len bytes of UTF-8 JSON
//! blobs             f32 values, tensors back to back in header order
//! ```
//!
//! The header is `{"tensors": [{"name", "shape", "offset", "len"}], "meta": …}`
//! where `offset` is the byte offset of the tensor's first value inside the
//! blob section.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PICS";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Writes `store` in store order. Values are narrowed to `f32`.
pub fn write<W: Write>(mut w: W, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let mut offset = 0u64;
    let tensors = store
        .iter()
        .map(|(_, name, t)| {
            let e = Entry {
                name: name.to_owned(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len() as u64,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        tensors,
        meta: meta.clone(),
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, _, t) in store.iter() {
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<(ParamStore, serde_json::Value)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;

    let mut blobs = Vec::new();
    r.read_to_end(&mut blobs)?;
    let mut store = ParamStore::new();
    for e in header.tensors {
        let start = e.offset as usize;
        let end = start + 4 * e.len as usize;
        let bytes = blobs
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past end of file", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(e.shape, data)
            .map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
        store.insert(e.name, t)?;
    }
    Ok((store, header.meta))
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    write(BufWriter::new(File::create(path)?), store, meta)
}

pub fn load(path: impl AsRef<Path>) -> Result<(ParamStore, serde_json::Value)> {
    read(BufReader::new(File::open(path)?))
}

/// Rounds every value to the nearest `f32` so that a save/load cycle is
/// lossless.
pub fn round_to_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}
