//! Binary weight files: a flat list of named little-endian `f32` tensors.
//!
//! ```text
//! "SGW1" u32:count { u16:name_len name u8:ndim u32:dim* f32:data* }*
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Real;

const MAGIC: &[u8; 4] = b"SGW1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32).map_err(io)?;
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has {} values for shape {:?}",
                t.name,
                t.data.len(),
                t.shape
            )));
        }
        w.write_u16::<LittleEndian>(t.name.len() as u16).map_err(io)?;
        w.write_all(t.name.as_bytes()).map_err(io)?;
        w.write_u8(t.shape.len() as u8).map_err(io)?;
        for &d in &t.shape {
            w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
        }
        for &v in &t.data {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |e: std::io::Error| Error::Checkpoint(format!("{}: {e}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let count = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>().map_err(bad)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(bad)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint(format!("{}: tensor name is not utf-8", path.display())))?;
        let ndim = r.read_u8().map_err(bad)? as usize;
        let shape = (0..ndim)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(bad)?;
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(bad)?;
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

/// Pop the tensor called `name` with the given shape.
pub fn take(tensors: &mut Vec<NamedTensor>, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let pos = tensors
        .iter()
        .position(|t| t.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
    let t = tensors.swap_remove(pos);
    if t.shape != shape {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has shape {:?}, expected {shape:?}",
            t.shape
        )));
    }
    Ok(t.data)
}

/// SHA-256 over the exact values of a parameter list.
pub fn checksum<'a, F: Real>(params: impl IntoIterator<Item = &'a [F]>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update((p.len() as u64).to_le_bytes());
        for v in p {
            h.update(v.to_f64_lossy().to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
