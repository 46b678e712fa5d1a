//! ETSR binary tensor files and manifest-indexed tensor directories.
//!
//! Layout: `b"ETSR"`, version byte (1), dtype byte (0 = f32), rank as u32 LE,
//! `rank` dims as u32 LE, then the row-major payload as f32 LE.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::ConvKernel;
use crate::tensor::{Element, Matrix, Tensor4};

pub const MAGIC: &[u8; 4] = b"ETSR";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Untyped-rank f32 tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_tensor4<T: Element>(t: &Tensor4<T>) -> Self {
        Self {
            dims: t.dims().to_vec(),
            data: crate::tensor::cast_slice(t.data()),
        }
    }

    pub fn from_matrix<T: Element>(m: &Matrix<T>) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: crate::tensor::cast_slice(m.data()),
        }
    }

    pub fn from_vector<T: Element>(v: &[T]) -> Self {
        Self {
            dims: vec![v.len()],
            data: crate::tensor::cast_slice(v),
        }
    }

    pub fn to_tensor4(&self) -> Result<Tensor4<f32>> {
        let dims: [usize; 4] = self
            .dims
            .as_slice()
            .try_into()
            .map_err(|_| Error::shape(format!("expected rank 4, got {:?}", self.dims)))?;
        Tensor4::new(dims, self.data.clone())
    }

    pub fn to_matrix(&self) -> Result<Matrix<f32>> {
        match self.dims.as_slice() {
            &[r, c] => Matrix::from_vec(r, c, self.data.clone()),
            d => Err(Error::shape(format!("expected rank 2, got {d:?}"))),
        }
    }

    pub fn to_vector(&self) -> Result<Vec<f32>> {
        match self.dims.as_slice() {
            &[_] => Ok(self.data.clone()),
            d => Err(Error::shape(format!("expected rank 1, got {d:?}"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(10 + 4 * self.dims.len() + 4 * self.data.len());
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = bytes;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if cur.len() < n {
                return Err(format!(
                    "truncated: wanted {n} more bytes, have {}",
                    cur.len()
                ));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = take(1)?[0];
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let dtype = take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(format!("unsupported dtype code {dtype}"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let rank = u32_at(take(4)?);
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(u32_at(take(4)?));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("element count overflows")?;
        let payload = take(count.checked_mul(4).ok_or("payload size overflows")?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if !cur.is_empty() {
            return Err(format!("{} trailing bytes", cur.len()));
        }
        Ok(Self { dims, data })
    }
}

pub fn write_tensor(path: &Path, t: &RawTensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&t.encode())?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    RawTensor::decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub role: String,
    pub file: String,
    pub dims: Vec<usize>,
}

/// Index of a tensor directory; `meta` carries owner-specific settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Tensors keyed by role, as loaded from or written to a directory.
#[derive(Clone, Debug, Default)]
pub struct TensorDir {
    pub tensors: BTreeMap<String, RawTensor>,
    pub meta: serde_json::Value,
}

impl TensorDir {
    pub fn insert(&mut self, role: impl Into<String>, t: RawTensor) {
        self.tensors.insert(role.into(), t);
    }

    pub fn get(&self, role: &str) -> Result<&RawTensor> {
        self.tensors
            .get(role)
            .ok_or_else(|| Error::MissingTensor(role.to_string()))
    }

    pub fn insert_conv(&mut self, prefix: &str, k: &ConvKernel<f32>) {
        self.insert(
            format!("{prefix}.weight"),
            RawTensor::from_tensor4(k.weight()),
        );
        self.insert(format!("{prefix}.bias"), RawTensor::from_vector(k.bias()));
    }

    pub fn conv(&self, prefix: &str) -> Result<ConvKernel<f32>> {
        let w = self.get(&format!("{prefix}.weight"))?.to_tensor4()?;
        let b = self.get(&format!("{prefix}.bias"))?.to_vector()?;
        ConvKernel::new(w, b)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (role, t) in &self.tensors {
            let file = format!("{role}.etsr");
            write_tensor(&dir.join(&file), t)?;
            entries.push(ManifestEntry {
                role: role.clone(),
                file,
                dims: t.dims.clone(),
            });
        }
        let manifest = Manifest {
            tensors: entries,
            meta: self.meta.clone(),
        };
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let mut out = TensorDir {
            tensors: BTreeMap::new(),
            meta: manifest.meta,
        };
        for e in manifest.tensors {
            let path: PathBuf = dir.join(&e.file);
            let t = read_tensor(&path)?;
            if t.dims != e.dims {
                return Err(Error::Format {
                    path,
                    reason: format!("manifest says {:?}, file has {:?}", e.dims, t.dims),
                });
            }
            out.tensors.insert(e.role, t);
        }
        Ok(out)
    }
}
