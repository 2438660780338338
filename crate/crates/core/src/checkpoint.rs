//! Self-describing tensor container used for checkpoints, probes and cached
//! feature stacks.
//!
//! Layout: the 8-byte magic `CLNDIFT1`, a little-endian `u64` header length,
//! a JSON header, then the tensor blobs as raw little-endian `f32` values.
//! Each header entry records name, shape, element type and byte offset
//! relative to the start of the blob section.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CLNDIFT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub component: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Container {
    pub component: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(component: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self {
            component: component.into(),
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn expect_component(&self, component: &str) -> Result<()> {
        if self.component != component {
            return Err(Error::Checkpoint(format!(
                "expected a `{component}` container, found `{}`",
                self.component
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob = Vec::new();
        for (name, tensor) in &self.tensors {
            if tensor.dtype() != DType::F32 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has dtype {:?}; containers hold f32 only",
                    tensor.dtype()
                )));
            }
            let values = tensor.flatten_all()?.to_vec1::<f32>()?;
            let offset = blob.len() as u64;
            for v in &values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: tensor.dims().to_vec(),
                dtype: "f32".into(),
                offset,
                nbytes: (values.len() * 4) as u64,
            });
        }
        let header = Header {
            component: self.component.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing container magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let blob = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Checkpoint(format!("unsupported dtype `{}`", entry.dtype)));
            }
            let count: usize = entry.shape.iter().product();
            if entry.nbytes as usize != count * 4 {
                return Err(Error::Checkpoint(format!("size mismatch for `{}`", entry.name)));
            }
            let start = entry.offset as usize;
            let end = start + entry.nbytes as usize;
            let raw = blob
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("blob for `{}` out of bounds", entry.name)))?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::from_vec(values, entry.shape.as_slice(), &Device::Cpu)?;
            tensors.push((entry.name.clone(), tensor));
        }
        Ok(Self {
            component: header.component,
            metadata: header.metadata,
            tensors,
        })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        atomic_write(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} has no file name", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{file_name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<u32>(), 1..64), split in 1usize..8) {
            // Arbitrary bit patterns, NaN payloads included.
            let floats: Vec<f32> = values.iter().map(|b| f32::from_bits(*b)).collect();
            let n = floats.len();
            let rows = (1..=split).rev().find(|r| n % r == 0).unwrap();
            let t = Tensor::from_vec(floats.clone(), (rows, n / rows), &Device::Cpu).unwrap();
            let mut c = Container::new("test", serde_json::json!({"k": 1}));
            c.push("a", t);
            c.push("b", Tensor::new(&[1.5f32], &Device::Cpu).unwrap());
            let back = Container::decode(&c.encode().unwrap()).unwrap();
            let got = back.get("a").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            prop_assert_eq!(got.iter().map(|f| f.to_bits()).collect::<Vec<_>>(), values);
            prop_assert_eq!(back.get("a").unwrap().dims(), &[rows, n / rows]);
            prop_assert_eq!(back.metadata, serde_json::json!({"k": 1}));
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::decode(b"not a container").is_err());
        let mut bytes = Container::new("x", serde_json::Value::Null).encode().unwrap();
        bytes[0] = b'X';
        assert!(Container::decode(&bytes).is_err());
    }

    #[test]
    fn rejects_truncated_blob() {
        let mut c = Container::new("x", serde_json::Value::Null);
        c.push("a", Tensor::new(&[1f32, 2.0, 3.0], &Device::Cpu).unwrap());
        let bytes = c.encode().unwrap();
        assert!(Container::decode(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/c.bin");
        let mut c = Container::new("heads", serde_json::json!({"component": "heads"}));
        c.push("w", Tensor::new(&[[1f32, -2.0], [3.0, 4.5]], &Device::Cpu).unwrap());
        c.save(&path).unwrap();
        let back = Container::load(&path).unwrap();
        back.expect_component("heads").unwrap();
        assert!(back.expect_component("backbone").is_err());
        assert_eq!(back.get("w").unwrap().to_vec2::<f32>().unwrap(), vec![vec![1.0, -2.0], vec![3.0, 4.5]]);
    }
}
