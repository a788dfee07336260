//! `PVT1` tensor container.
//!
//! Layout on disk: the 4-byte magic `PVT1`, a little-endian `u32` header
//! length, a UTF-8 JSON header `{"dtype":"f32","shape":[..],"layout":".."}`
//! and a raw little-endian `f32` payload in row-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PVT1";

/// Layout tag used for video clips and flow fields.
pub const LAYOUT_THWC: &str = "THWC";
/// Layout tag used for parameters and optimizer state.
pub const LAYOUT_ROW_MAJOR: &str = "row_major";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub layout: String,
}

/// A host-side `f32` array as stored in a container.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub layout: String,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn new(shape: Vec<usize>, layout: impl Into<String>, data: Vec<f32>) -> Result<Self> {
        let n = element_count(&shape).ok_or_else(|| {
            Error::Dimension(format!("shape {shape:?} overflows the element count"))
        })?;
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            layout: layout.into(),
            data,
        })
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn encode(tensor: &StoredTensor) -> Result<Vec<u8>> {
    let header = TensorHeader {
        dtype: "f32".to_string(),
        shape: tensor.shape.clone(),
        layout: tensor.layout.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Dimension("tensor header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(8 + header.len() + tensor.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a container. `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<StoredTensor> {
    if bytes.len() < 8 {
        return Err(Error::format(origin, "file shorter than the fixed prefix"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(origin, "bad magic, expected PVT1"));
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if header_len > body.len() {
        return Err(Error::format(
            origin,
            format!("header length {header_len} exceeds file size"),
        ));
    }
    let header: TensorHeader = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::format(origin, format!("header parse failure: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::format(
            origin,
            format!("unsupported dtype `{}`", header.dtype),
        ));
    }
    let count = element_count(&header.shape)
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)))
        .ok_or_else(|| Error::format(origin, "shape product overflows"))?;
    let payload = &body[header_len..];
    if payload.len() != count.1 {
        return Err(Error::format(
            origin,
            format!(
                "payload holds {} bytes but shape {:?} needs {}",
                payload.len(),
                header.shape,
                count.1
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(StoredTensor {
        shape: header.shape,
        layout: header.layout,
        data,
    })
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &StoredTensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
