//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "SATCKPT1"
//! u64       header length in bytes
//! header    UTF-8 JSON: { "format": "sat-checkpoint", "version": 1,
//!                         "config": NetworkConfig,
//!                         "tensors": [{ "name", "shape", "offset", "len" }] }
//! payload   f64 values of every tensor, concatenated in header order
//! ```
//!
//! `offset` and `len` count `f64` elements from the start of the payload.
//! Values are stored as raw IEEE-754 bits, so reloading is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetworkConfig, Param, SegNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SATCKPT1";
const FORMAT: &str = "sat-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(net: &SegNet, mut w: impl Write) -> Result<()> {
    let mut offset = 0;
    let tensors = net
        .params()
        .iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset,
                len: p.data.len(),
            };
            offset += p.data.len();
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: net.config().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset * 8);
    for p in net.params().iter() {
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<SegNet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidCheckpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::InvalidCheckpoint("header too large".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::InvalidCheckpoint(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::InvalidCheckpoint("truncated payload".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let end = t.offset.checked_add(t.len).filter(|&e| e <= values.len());
        let end = end.ok_or_else(|| Error::InvalidCheckpoint(format!("tensor {} out of bounds", t.name)))?;
        if t.shape.iter().product::<usize>() != t.len {
            return Err(Error::InvalidCheckpoint(format!("tensor {} shape/len mismatch", t.name)));
        }
        params.push(Param {
            name: t.name,
            shape: t.shape,
            data: values[t.offset..end].to_vec(),
        });
    }
    SegNet::from_parts(header.config, params)
}

pub fn save_checkpoint(net: &SegNet, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SegNet> {
    let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_checkpoint(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::InvalidCheckpoint(m) => Error::file(path, m),
        other => other,
    })
}
