//! DTNS binary tensor format.
//!
//! Layout: magic `DTNS`, u8 version (1), u8 dtype (1=f32, 2=f64, 3=i32),
//! u8 ndim, ndim little-endian u64 extents, then the raw little-endian
//! row-major payload. Every tensor, mask, and checkpoint entry on disk uses
//! this format.

use std::fs;
use std::path::Path;

use super::tensor::{Dtype, Scalar, Tensor};
use super::TensorError;

pub const MAGIC: &[u8; 4] = b"DTNS";
pub const VERSION: u8 = 1;

/// A tensor of any supported dtype, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::I32 { shape, .. } => shape,
        }
    }
}

fn encode_header(dtype: Dtype, shape: &[usize]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(7 + 8 * shape.len());
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.push(dtype as u8);
    bytes.push(shape.len() as u8);
    for &e in shape {
        bytes.extend_from_slice(&(e as u64).to_le_bytes());
    }
    bytes
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut bytes = encode_header(T::DTYPE, t.shape());
    bytes.reserve(t.numel() * T::BYTES);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes_vec());
    }
    bytes
}

pub fn encode_i32(shape: &[usize], data: &[i32]) -> Vec<u8> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut bytes = encode_header(Dtype::I32, shape);
    bytes.reserve(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<(), TensorError> {
    crate::util::atomic_write(path, &encode_tensor(t)).map_err(|e| TensorError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn save_i32(path: &Path, shape: &[usize], data: &[i32]) -> Result<(), TensorError> {
    crate::util::atomic_write(path, &encode_i32(shape, data)).map_err(|e| TensorError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn decode(bytes: &[u8], name: &str) -> Result<AnyTensor, TensorError> {
    let fail = |reason: &str| TensorError::Format {
        path: name.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 7 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(fail(&format!("unsupported version {}", bytes[4])));
    }
    let dtype = bytes[5];
    let ndim = bytes[6] as usize;
    if bytes.len() < 7 + 8 * ndim {
        return Err(fail("truncated extents"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[7 + 8 * i..15 + 8 * i]);
        shape.push(u64::from_le_bytes(buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = &bytes[7 + 8 * ndim..];
    let width = match dtype {
        1 => 4,
        2 => 8,
        3 => 4,
        other => return Err(fail(&format!("unknown dtype code {other}"))),
    };
    if payload.len() != numel * width {
        return Err(fail(&format!(
            "payload length {} does not match shape {:?} (expected {})",
            payload.len(),
            shape,
            numel * width
        )));
    }
    Ok(match dtype {
        1 => AnyTensor::F32(
            Tensor::new(shape, payload.chunks(4).map(f32::from_le_slice).collect())
                .map_err(|_| fail("bad shape"))?,
        ),
        2 => AnyTensor::F64(
            Tensor::new(shape, payload.chunks(8).map(f64::from_le_slice).collect())
                .map_err(|_| fail("bad shape"))?,
        ),
        _ => AnyTensor::I32 {
            shape,
            data: payload
                .chunks(4)
                .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        },
    })
}

pub fn load(path: &Path) -> Result<AnyTensor, TensorError> {
    let bytes = fs::read(path).map_err(|e| TensorError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    decode(&bytes, &path.display().to_string())
}

pub fn load_f32(path: &Path) -> Result<Tensor<f32>, TensorError> {
    match load(path)? {
        AnyTensor::F32(t) => Ok(t),
        other => Err(TensorError::Format {
            path: path.display().to_string(),
            reason: format!("expected f32 tensor, found {:?} dtype", dtype_name(&other)),
        }),
    }
}

pub fn load_i32(path: &Path) -> Result<(Vec<usize>, Vec<i32>), TensorError> {
    match load(path)? {
        AnyTensor::I32 { shape, data } => Ok((shape, data)),
        other => Err(TensorError::Format {
            path: path.display().to_string(),
            reason: format!("expected i32 tensor, found {:?} dtype", dtype_name(&other)),
        }),
    }
}

fn dtype_name(t: &AnyTensor) -> &'static str {
    match t {
        AnyTensor::F32(_) => "f32",
        AnyTensor::F64(_) => "f64",
        AnyTensor::I32 { .. } => "i32",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::<f32>::zeros(vec![2, 3]);
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[0..4], b"DTNS");
        assert_eq!(bytes[4], 1); // version
        assert_eq!(bytes[5], 1); // f32
        assert_eq!(bytes[6], 2); // ndim
        assert_eq!(u64::from_le_bytes(bytes[7..15].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[15..23].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 23 + 6 * 4);
    }

    #[test]
    fn truncated_file_reports_the_offending_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.dtns");
        let t = Tensor::<f64>::from_fn(vec![4], |i| i as f64);
        let mut bytes = encode_tensor(&t);
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        let err = load(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("broken.dtns"), "{msg}");
    }

    #[test]
    fn i32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.dtns");
        let data: Vec<i32> = (0..12).map(|i| i % 3).collect();
        save_i32(&p, &[3, 4], &data).unwrap();
        let (shape, back) = load_i32(&p).unwrap();
        assert_eq!(shape, vec![3, 4]);
        assert_eq!(back, data);
    }
}
