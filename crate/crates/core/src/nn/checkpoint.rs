//! Checkpoint directories: `manifest.json` plus `weights.bin`.
//!
//! The blob holds little-endian `f32` arrays concatenated in manifest order;
//! `offset` and `length` are byte counts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamTensor, Real};
use crate::error::{Error, Result};
use crate::io;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_kind: String,
    pub config: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_kind: String,
    config: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn new(model_kind: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            model_kind: model_kind.into(),
            config,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn push_params<T: Real>(&mut self, params: &[ParamTensor<T>]) {
        for p in params {
            let data = p.value.iter().map(|v| v.f64() as f32).collect();
            self.push(p.name.clone(), &p.shape, data);
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Fails unless the checkpoint was written for `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.model_kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.model_kind
            )));
        }
        Ok(())
    }

    /// Copies stored arrays into `params`, matching by name and shape.
    pub fn load_params<T: Real>(&self, params: &mut [ParamTensor<T>]) -> Result<()> {
        for p in params.iter_mut() {
            let a = self
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{}`", p.name)))?;
            if a.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "array `{}` has shape {:?}, model expects {:?}",
                    p.name, a.shape, p.shape
                )));
            }
            p.value = a.data.iter().map(|&v| T::of(v as f64)).collect();
            p.grad = vec![T::zero(); p.value.len()];
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let expected: usize = a.shape.iter().product();
            if expected != a.data.len() {
                return Err(Error::Checkpoint(format!(
                    "array `{}` has {} values for shape {:?}",
                    a.name,
                    a.data.len(),
                    a.shape
                )));
            }
            let offset = blob.len() as u64;
            for v in &a.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ArrayEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                dtype: "f32".into(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model_kind: self.model_kind.clone(),
            config: self.config.clone(),
            arrays: entries,
        };
        io::write_file(&dir.join(WEIGHTS_FILE), &blob)?;
        io::write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = io::read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unknown format version {}",
                manifest.format_version
            )));
        }
        let blob = io::read_bytes(&dir.join(WEIGHTS_FILE))?;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        let mut cursor = 0u64;
        for e in manifest.arrays {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("array `{}` has dtype `{}`", e.name, e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            if e.length != 4 * count as u64 {
                return Err(Error::Checkpoint(format!(
                    "array `{}` length {} does not match shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
            if e.offset != cursor {
                return Err(Error::Checkpoint(format!("array `{}` is not contiguous", e.name)));
            }
            let end = e.offset + e.length;
            if end > blob.len() as u64 {
                return Err(Error::Checkpoint(format!(
                    "weights blob is {} bytes, array `{}` ends at {end}",
                    blob.len(),
                    e.name
                )));
            }
            let data = blob[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data,
            });
            cursor = end;
        }
        if cursor != blob.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "weights blob has {} trailing bytes",
                blob.len() as u64 - cursor
            )));
        }
        Ok(Self {
            model_kind: manifest.model_kind,
            config: manifest.config,
            arrays,
        })
    }
}
