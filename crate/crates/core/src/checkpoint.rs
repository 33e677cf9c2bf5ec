//! Versioned binary container for parameter stores.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, JSON header,
//! then every tensor as little-endian `f32` in header order. The header
//! carries a caller-defined `meta` object and the tensor index.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{flat_f32, ParamStore};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write(
    path: &Path,
    magic: &[u8; 8],
    version: u32,
    meta: serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let header = Header {
        meta,
        tensors: store
            .iter()
            .map(|(name, v)| TensorEntry {
                name: name.to_string(),
                shape: v.dims().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, var) in store.iter() {
        for x in flat_f32(var.as_tensor())? {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back as `(version, meta, store)`.
pub fn read(
    path: &Path,
    magic: &[u8; 8],
    dtype: DType,
) -> Result<(u32, serde_json::Value, ParamStore)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut got = [0u8; 8];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(Error::BadCheckpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            String::from_utf8_lossy(&got)
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut store = ParamStore::new(dtype);
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(
            &entry.name,
            Tensor::from_vec(data, entry.shape.as_slice(), &Device::Cpu)?,
        )?;
    }
    Ok((version, header.meta, store))
}
