//! Raw tensor file format.
//!
//! Layout: magic `TNSR`, `u8` version (1), `u8` dtype (0 = f32, 1 = f64),
//! `u8` ndim, one padding byte, `ndim` little-endian `u32` dims, then the
//! row-major payload in little-endian order. In-memory tensors are always
//! f64; f32 files are widened on read and narrowed on write.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

pub fn encode_tensor(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.push(t.rank() as u8);
    out.push(0); // padding
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(Error::format(bytes.len(), "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected TNSR"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(4, format!("unsupported version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::format(5, format!("unknown dtype {other}"))),
    };
    let ndim = bytes[6] as usize;
    let dims_end = 8 + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::format(bytes.len(), "truncated dimension table"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 8 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::format(off, "zero-length dimension"));
        }
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let elem = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let expected = dims_end + numel * elem;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected),
            format!("payload size {} != expected {}", bytes.len() - dims_end, numel * elem),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    match dtype {
        DType::F32 => {
            for i in 0..numel {
                let off = dims_end + 4 * i;
                data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
            }
        }
        DType::F64 => {
            for i in 0..numel {
                let off = dims_end + 8 * i;
                data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            }
        }
    }
    Tensor::new(data, &shape)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    fs::write(path, encode_tensor(t, dtype))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f64_is_exact() {
        let t = Tensor::new(vec![1.5, -2.25, 3.0e-7, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let back = decode_tensor(&encode_tensor(&t, DType::F64)).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn f32_roundtrip_quantizes() {
        let t = Tensor::new(vec![0.1, 0.2], &[2]).unwrap();
        let back = decode_tensor(&encode_tensor(&t, DType::F32)).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let mut bytes = encode_tensor(&t, DType::F64);
        bytes[0] = b'X';
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format { offset: 0, .. })));

        let bytes = encode_tensor(&t, DType::F64);
        assert!(matches!(
            decode_tensor(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn header_length_matches_spec() {
        let t = Tensor::zeros(&[4, 4]);
        let bytes = encode_tensor(&t, DType::F64);
        // 4 magic + 1 version + 1 dtype + 1 ndim + 1 pad + 2*4 dims + 16*8 payload
        assert_eq!(bytes.len(), 8 + 8 + 128);
    }
}
