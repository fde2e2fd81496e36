//! Binary file formats.
//!
//! Sample tensors: magic `ZTNS`, version `u32`, rank `u32`, dims `u32[rank]`,
//! then row-major little-endian `f32` values.
//!
//! Checkpoints: 4-byte magic, version `u32`, header length `u32`, UTF-8 JSON
//! header, then every tensor listed in the header's `tensor_dims` in order as
//! little-endian `f32` values.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"ZTNS";
pub const FORMAT_VERSION: u32 = 1;

/// Tensor as stored on disk; values are not checked for finiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn into_tensor(self) -> Result<Tensor> {
        Tensor::new(self.dims, self.data)
    }
}

pub fn encode_tensor(dims: &[usize], data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    push_f32s(&mut out, data);
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<RawTensor> {
    let mut r = Reader::new(bytes, path);
    r.magic(TENSOR_MAGIC)?;
    r.version()?;
    let rank = r.u32()? as usize;
    let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let data = r.f32s(n)?;
    r.finish()?;
    Ok(RawTensor { dims, data })
}

pub fn write_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    write_bytes(path, &encode_tensor(dims, data))
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader<H> {
    tensor_dims: Vec<Vec<usize>>,
    #[serde(flatten)]
    body: H,
}

pub fn encode_checkpoint<H: Serialize>(magic: &[u8; 4], header: &H, tensors: &[&Tensor]) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        tensor_dims: tensors.iter().map(|t| t.dims().to_vec()).collect(),
        body: header,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        push_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint<H: DeserializeOwned>(magic: &[u8; 4], bytes: &[u8], path: &Path) -> Result<(H, Vec<Tensor>)> {
    let mut r = Reader::new(bytes, path);
    r.magic(magic)?;
    r.version()?;
    let len = r.u32()? as usize;
    let json = r.take(len)?;
    let header: CheckpointHeader<H> = serde_json::from_slice(json).map_err(|e| r.err(format!("header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensor_dims.len());
    for dims in header.tensor_dims {
        let n: usize = dims.iter().product();
        let data = r.f32s(n)?;
        tensors.push(Tensor::new(dims, data).map_err(|e| r.err(e.to_string()))?);
    }
    r.finish()?;
    Ok((header.body, tensors))
}

pub fn write_checkpoint<H: Serialize>(path: &Path, magic: &[u8; 4], header: &H, tensors: &[&Tensor]) -> Result<()> {
    write_bytes(path, &encode_checkpoint(magic, header, tensors)?)
}

pub fn read_checkpoint<H: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<(H, Vec<Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(magic, &bytes, path)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn push_f32s(out: &mut Vec<u8>, data: &[f64]) {
    for &x in data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_layout_is_exact() {
        let bytes = encode_tensor(&[2, 1], &[1.0, -2.5]);
        let mut expect = b"ZTNS".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
        let back = decode_tensor(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.dims, vec![2, 1]);
        assert_eq!(back.data, vec![1.0, -2.5]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let bytes = encode_tensor(&[3], &[1.0, 2.0, 3.0]);
        assert!(decode_tensor(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad, Path::new("mem")).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct H {
            name: String,
        }
        let a = Tensor::matrix(2, 3, vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0]).unwrap();
        let b = Tensor::vector(vec![-1.0]).unwrap();
        let h = H { name: "x".into() };
        let bytes = encode_checkpoint(b"ZDVS", &h, &[&a, &b]).unwrap();
        assert_eq!(&bytes[..4], b"ZDVS");
        let (h2, ts): (H, _) = decode_checkpoint(b"ZDVS", &bytes, Path::new("mem")).unwrap();
        assert_eq!(h2, h);
        assert_eq!(ts, vec![a, b]);
        assert!(decode_checkpoint::<H>(b"ZREL", &bytes, Path::new("mem")).is_err());
    }
}
