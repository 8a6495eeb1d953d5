//! Single-file tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `HGRIDCKP` |
//! | 4 | format version (`u32`, currently 1) |
//! | 8 | manifest length `L` in bytes (`u64`) |
//! | L | UTF-8 JSON manifest |
//! | … | payload: every tensor as little-endian `f64`, row-major |
//!
//! The manifest is `{"tensors": [{"name", "shape", "offset"}, …]}` where
//! `offset` is the byte offset of the tensor inside the payload. Tensors
//! appear in parameter-store order and are contiguous.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HGRIDCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

pub fn encode(params: &ParamStore) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(params.len());
    for (_, name, t) in params.iter() {
        tensors.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest { tensors })?;
    let mut out = Vec::with_capacity(20 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, _, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Parses an archive into `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut rest = bytes;
    if take(&mut rest, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint archive".into()));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut rest, 8, "manifest length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("manifest length overflows".into()))?;
    let manifest: Manifest = serde_json::from_slice(take(&mut rest, len, "manifest")?)
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    let payload = rest;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let start = usize::try_from(entry.offset)
            .map_err(|_| Error::Checkpoint(format!("offset of `{}` overflows", entry.name)))?;
        let end = count
            .checked_mul(8)
            .and_then(|b| start.checked_add(b))
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "tensor `{}` {:?} at offset {} runs past the {}-byte payload",
                    entry.name,
                    entry.shape,
                    entry.offset,
                    payload.len()
                ))
            })?;
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    Ok(out)
}

pub fn save(params: &ParamStore, path: &Path) -> Result<()> {
    let bytes = encode(params)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads every tensor of `params` from `path`. Names must match exactly and
/// shapes must agree; the store is only modified if everything checks out.
pub fn load_into(params: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = decode(&bytes)?;
    let mut staged = Vec::with_capacity(tensors.len());
    for (name, tensor) in tensors {
        let id = params
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}` in {}", path.display())))?;
        let expected = params.get(id).shape();
        if expected != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?} in checkpoint but the model expects {:?}",
                tensor.shape(),
                expected
            )));
        }
        staged.push((id, tensor));
    }
    if staged.len() != params.len() {
        let missing: Vec<&str> = params
            .iter()
            .filter(|(id, _, _)| !staged.iter().any(|(s, _)| s == id))
            .map(|(_, n, _)| n)
            .collect();
        return Err(Error::Checkpoint(format!("missing tensors: {}", missing.join(", "))));
    }
    for (id, tensor) in staged {
        params.set(id, tensor)?;
    }
    Ok(())
}
