//! Flat binary container of named f32 arrays.
//!
//! Layout: `u64` little-endian header length, a JSON header
//! `[{name, shape, dtype: "f32", offset}]` with offsets in bytes from the
//! start of the data section, then the little-endian data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum WeightError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub tensors: BTreeMap<String, Tensor>,
}

impl WeightFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `data` narrowed to f32.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(
            name.into(),
            Tensor {
                shape,
                data: data.iter().map(|v| *v as f32).collect(),
            },
        );
    }

    /// Fetches a tensor widened to f64, checking its shape.
    pub fn get(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>, WeightError> {
        let t = self.tensors.get(name).ok_or_else(|| WeightError::Missing(name.to_string()))?;
        if t.shape != shape {
            return Err(WeightError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                got: t.shape.clone(),
            });
        }
        Ok(t.data.iter().map(|v| *v as f64).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            header.push(HeaderEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
                offset,
            });
            offset += 4 * t.data.len() as u64;
        }
        let json = serde_json::to_vec(&header).expect("header is plain data");
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightError> {
        let corrupt = |m: &str| WeightError::Corrupt(m.to_string());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| corrupt("short header"))?.try_into().unwrap();
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| corrupt("header length"))?;
        let json = bytes.get(8..8usize.saturating_add(hlen)).ok_or_else(|| corrupt("truncated header"))?;
        let header: Vec<HeaderEntry> = serde_json::from_slice(json).map_err(|e| WeightError::Corrupt(e.to_string()))?;
        let data = &bytes[8 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in header {
            if e.dtype != "f32" {
                return Err(WeightError::Corrupt(format!("unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = data
                .get(start..start + 4 * n)
                .ok_or_else(|| WeightError::Corrupt(format!("tensor `{}` out of range", e.name)))?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(e.name, Tensor { shape: e.shape, data: values });
        }
        Ok(WeightFile { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeightError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeightError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut w = WeightFile::new();
        w.insert("b", vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
        w.insert("a", vec![1], &[-0.25]);
        let bytes = w.to_bytes();
        let back = WeightFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.get("b", &[2, 3]).unwrap()[5], 6.5);
        assert!(matches!(back.get("b", &[3, 2]), Err(WeightError::ShapeMismatch { .. })));
        assert!(matches!(back.get("c", &[1]), Err(WeightError::Missing(_))));
    }

    #[test]
    fn header_layout() {
        let mut w = WeightFile::new();
        w.insert("x", vec![2], &[1.0, 2.0]);
        let bytes = w.to_bytes();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header[0]["dtype"], "f32");
        assert_eq!(header[0]["offset"], 0);
        assert_eq!(&bytes[8 + hlen..8 + hlen + 4], &1.0f32.to_le_bytes());
        assert!(WeightFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
