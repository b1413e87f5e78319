//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `KGNTMCK1`, u64 little-endian manifest length, the
//! JSON manifest, then every tensor's data as little-endian f64 in manifest
//! order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KGNTMCK1";

const TENSOR_REF: &str = "$tensor";

fn is_tensor(v: &Value) -> bool {
    v.as_object().is_some_and(|m| {
        m.len() == 2 && m.get("shape").is_some_and(Value::is_array) && m.get("data").is_some_and(Value::is_array)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let mut pos = end;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let n = entry.shape[0] * entry.shape[1];
            let stop = pos + n * 8;
            if stop > bytes.len() {
                return Err(Error::Checkpoint(format!("truncated payload for {}", entry.name)));
            }
            let data = bytes[pos..stop]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos = stop;
            tensors.push((entry.name, Tensor::new(entry.shape[0], entry.shape[1], data)?));
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    /// Stores `value` under `meta[key]`, moving every tensor it contains into
    /// the binary payload. `meta` must be an object (or null).
    pub fn pack<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        self.extract(&mut v, key.to_string());
        if self.meta.is_null() {
            self.meta = Value::Object(Default::default());
        }
        let obj = self
            .meta
            .as_object_mut()
            .ok_or_else(|| Error::Checkpoint("meta is not an object".into()))?;
        obj.insert(key.to_string(), v);
        Ok(())
    }

    pub fn unpack<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let mut v = self
            .meta
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {key:?}")))?;
        self.restore(&mut v)?;
        serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
    }

    fn extract(&mut self, v: &mut Value, path: String) {
        if is_tensor(v) {
            let t: Tensor = serde_json::from_value(v.take()).expect("tensor-shaped value");
            *v = serde_json::json!({ TENSOR_REF: path });
            self.tensors.push((path, t));
            return;
        }
        match v {
            Value::Object(m) => {
                for (k, child) in m.iter_mut() {
                    self.extract(child, format!("{path}.{k}"));
                }
            }
            Value::Array(a) => {
                for (i, child) in a.iter_mut().enumerate() {
                    self.extract(child, format!("{path}.{i}"));
                }
            }
            _ => {}
        }
    }

    fn restore(&self, v: &mut Value) -> Result<()> {
        if let Some(name) = v.as_object().filter(|m| m.len() == 1).and_then(|m| m.get(TENSOR_REF)) {
            let name = name.as_str().unwrap_or_default();
            let t = self
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
            *v = serde_json::to_value(t).map_err(|e| Error::Checkpoint(e.to_string()))?;
            return Ok(());
        }
        match v {
            Value::Object(m) => m.values_mut().try_for_each(|c| self.restore(c)),
            Value::Array(a) => a.iter_mut().try_for_each(|c| self.restore(c)),
            _ => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
