//! Named `f32` tensor archive: `manifest.json` + little-endian `weights.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

pub fn write_archive(dir: &Path, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut bytes = Vec::new();
    for (name, t) in tensors {
        entries.push(ArchiveEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: bytes.len() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&entries).map_err(|e| Error::json(&mpath, e))?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, bytes).map_err(|e| Error::io(&wpath, e))
}

pub fn read_archive(dir: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mpath = dir.join(MANIFEST_FILE);
    let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let entries: Vec<ArchiveEntry> = serde_json::from_slice(&raw).map_err(|e| Error::json(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut out = Vec::with_capacity(entries.len());
    let mut expected_offset = 0u64;
    for e in entries {
        if e.dtype != "f32" {
            return Err(Error::format(&mpath, format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.byte_offset != expected_offset {
            return Err(Error::format(&mpath, format!("{}: offset {} out of order", e.name, e.byte_offset)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + 4 * n;
        if end > bytes.len() {
            return Err(Error::format(&wpath, format!("{}: truncated weights", e.name)));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| Error::format(&mpath, format!("{}: {err}", e.name)))?;
        out.push((e.name, t));
        expected_offset = end as u64;
    }
    if expected_offset as usize != bytes.len() {
        return Err(Error::format(&wpath, "trailing bytes after last tensor"));
    }
    Ok(out)
}
