//! Sectioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (kind tag, free-form metadata, array names and shapes), then every
//! array's data as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NamedArray, NeuralError, ParamVector};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FEWNERCK";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// e.g. `steppingstone`, `meta-trained`, `classifier`.
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamVector,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayHeader>,
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<(), NeuralError> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: ckpt.kind.clone(),
        meta: ckpt.meta.clone(),
        arrays: ckpt
            .params
            .arrays()
            .iter()
            .map(|a| ArrayHeader { name: a.name.clone(), shape: a.shape.clone() })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for a in ckpt.params.arrays() {
        let mut buf = Vec::with_capacity(a.data.len() * 8);
        for x in &a.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, NeuralError> {
    let bad = |m: &str| NeuralError::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(NeuralError::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut l = [0u8; 8];
    r.read_exact(&mut l)?;
    let len = u64::from_le_bytes(l) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad("header version disagrees with preamble"));
    }
    let mut params = ParamVector::new();
    for a in header.arrays {
        let n: usize = a.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.push(NamedArray { name: a.name, shape: a.shape, data });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes after last array"));
    }
    Ok(Checkpoint { kind: header.kind, meta: header.meta, params })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), NeuralError> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, NeuralError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
