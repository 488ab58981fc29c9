//! Named-tensor archive: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header (dtype, metadata, tensor manifest) and the raw
//! little-endian tensor data, tensors sorted by name.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaipError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SAIPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub dtype: String,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory form of an archive.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive<T> {
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for Archive<T> {
    fn default() -> Self {
        Archive {
            metadata: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Archive<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = data.len() as u64;
            for &v in t.data() {
                v.write_le(&mut data);
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
                offset,
                len: data.len() as u64 - offset,
            });
        }
        let header = Header {
            version: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        out
    }

    /// Parses an archive, converting elements if it was written at another
    /// precision.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| SaipError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(format!("corrupt header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.version)));
        }
        let data = &bytes[body..];
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let t = match header.dtype.as_str() {
                "f32" => decode::<f32, T>(data, e),
                "f64" => decode::<f64, T>(data, e),
                other => return Err(bad(format!("unknown dtype {other}"))),
            }
            .ok_or_else(|| bad(format!("tensor `{}` is truncated or misshapen", e.name)))?;
            tensors.insert(e.name.clone(), t);
        }
        Ok(Archive {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SaipError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn meta<V: serde::de::DeserializeOwned>(&self, key: &str, path: &Path) -> Result<V> {
        let v = self.metadata.get(key).ok_or_else(|| SaipError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing metadata `{key}`"),
        })?;
        serde_json::from_value(v.clone()).map_err(|e| SaipError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("metadata `{key}`: {e}"),
        })
    }

    pub fn set_meta<V: Serialize>(&mut self, key: &str, value: &V) {
        self.metadata
            .insert(key.to_string(), serde_json::to_value(value).expect("metadata serialises"));
    }

    /// Tensors whose names start with `prefix/`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor<T>> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn insert_group<'a>(&mut self, prefix: &str, items: impl IntoIterator<Item = (&'a String, &'a Tensor<T>)>) {
        for (n, t) in items {
            self.tensors.insert(format!("{prefix}/{n}"), t.clone());
        }
    }
}

fn decode<S: Scalar, T: Scalar>(data: &[u8], e: &TensorEntry) -> Option<Tensor<T>> {
    let start = usize::try_from(e.offset).ok()?;
    let len = usize::try_from(e.len).ok()?;
    let end = start.checked_add(len)?;
    let n = e.shape[0].checked_mul(e.shape[1])?;
    if end > data.len() || len != n * S::BYTES {
        return None;
    }
    let values = data[start..end]
        .chunks_exact(S::BYTES)
        .map(|c| T::from_f64(S::read_le(c).as_f64()).unwrap_or_else(T::nan))
        .collect();
    Tensor::from_vec(e.shape[0], e.shape[1], values).ok()
}

/// Writes to a sibling temporary file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| SaipError::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| SaipError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| SaipError::io(&tmp, e))?;
    f.sync_all().map_err(|e| SaipError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| SaipError::io(path, e))
}
