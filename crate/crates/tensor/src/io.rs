//! Binary tensor files.
//!
//! Layout: magic `MCCT`, one byte dtype code (0 = f32, 1 = f64), one byte
//! rank, `rank` little-endian u64 extents, then the row-major little-endian
//! payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MCCT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(TensorError::Format(format!("unknown dtype code {other}"))),
        }
    }
}

pub fn encode(t: &Tensor, dtype: DType) -> Vec<u8> {
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + width * t.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

/// Decodes a tensor and the dtype it was stored with. `f32` payloads are
/// widened to `f64`.
pub fn decode(mut bytes: &[u8]) -> Result<(Tensor, DType)> {
    let mut header = [0u8; 6];
    bytes
        .read_exact(&mut header)
        .map_err(|_| TensorError::Format("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let dtype = DType::from_code(header[4])?;
    let rank = header[5] as usize;
    if rank == 0 {
        return Err(TensorError::Format("rank 0".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        bytes
            .read_exact(&mut b)
            .map_err(|_| TensorError::Format("truncated extents".into()))?;
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = dims.iter().product();
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    if bytes.len() != n * width {
        return Err(TensorError::Format(format!(
            "payload is {} bytes, expected {}",
            bytes.len(),
            n * width
        )));
    }
    let data = match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((Tensor::new(&dims, data)?, dtype))
}

pub fn save(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let io_err = |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&encode(t, dtype)).map_err(io_err)
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t, DType::F64);
        assert_eq!(&b[..4], b"MCCT");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..14], &2u64.to_le_bytes());
        assert_eq!(&b[14..22], &1u64.to_le_bytes());
        assert_eq!(&b[22..30], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 38);
    }

    #[test]
    fn f32_payload_widens() {
        let t = Tensor::vector(&[0.5, 0.25]);
        let (back, dtype) = decode(&encode(&t, DType::F32)).unwrap();
        assert_eq!(dtype, DType::F32);
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"MCC").is_err());
        assert!(decode(b"XXXX\x01\x01").is_err());
        let mut b = encode(&Tensor::scalar(1.0), DType::F64);
        b.pop();
        assert!(decode(&b).is_err());
        b[4] = 9;
        assert!(decode(&b).is_err());
    }
}
