//! Binary tensor files.
//!
//! Layout, all little-endian: magic `FBVT`, `u16` version, `u8` dtype code,
//! `u8` rank, `rank` dimensions as `u32`, then the row-major payload.

use std::path::Path;

use fbev_core::Error;
use ndarray::{ArrayD, IxDyn};

use crate::fsutil::write_atomic;

pub const MAGIC: [u8; 4] = *b"FBVT";
pub const VERSION: u16 = 1;
const HEADER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U8 = 3,
    U16 = 4,
    I32 = 5,
}

impl DType {
    pub const ALL: [DType; 5] = [DType::F32, DType::F64, DType::U8, DType::U16, DType::I32];

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|d| *d as u8 == code)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U16(Vec<u16>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::U16(_) => DType::U16,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

fn data_error(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, Error> {
        if dims.len() > u8::MAX as usize {
            return Err(data_error(format!("rank {} is too large", dims.len())));
        }
        if let Some(d) = dims.iter().find(|&&d| d > u32::MAX as usize) {
            return Err(data_error(format!("dimension {d} does not fit in u32")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(data_error(format!("{} values for dims {dims:?}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Self {
        Self {
            dims: a.shape().to_vec(),
            data: TensorData::F64(a.iter().copied().collect()),
        }
    }

    pub fn from_u8<D: ndarray::Dimension>(a: &ndarray::Array<u8, D>) -> Self {
        Self {
            dims: a.shape().to_vec(),
            data: TensorData::U8(a.iter().copied().collect()),
        }
    }

    /// Stores counts as `i32`; fails if a count exceeds `i32::MAX`.
    pub fn from_counts<D: ndarray::Dimension>(a: &ndarray::Array<u32, D>) -> Result<Self, Error> {
        let data = a
            .iter()
            .map(|&v| i32::try_from(v).map_err(|_| data_error(format!("count {v} exceeds i32"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            dims: a.shape().to_vec(),
            data: TensorData::I32(data),
        })
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> ArrayD<f64> {
        let v: Vec<f64> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::U16(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::I32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        };
        ArrayD::from_shape_vec(IxDyn(&self.dims), v).expect("length checked on construction")
    }

    /// Integer tensors as `u8`; fails on floats or values above 255.
    pub fn to_u8(&self) -> Result<ArrayD<u8>, Error> {
        let v: Vec<u8> = match &self.data {
            TensorData::U8(v) => v.clone(),
            TensorData::U16(v) => v.iter().map(|&x| u8::try_from(x)).collect::<Result<_, _>>().map_err(|_| data_error("label above 255"))?,
            TensorData::I32(v) => v.iter().map(|&x| u8::try_from(x)).collect::<Result<_, _>>().map_err(|_| data_error("label outside 0..=255"))?,
            _ => return Err(data_error(format!("expected an integer tensor, got {:?}", self.dtype()))),
        };
        Ok(ArrayD::from_shape_vec(IxDyn(&self.dims), v).expect("length checked on construction"))
    }

    /// Integer tensors as non-negative counts.
    pub fn to_counts(&self) -> Result<ArrayD<u32>, Error> {
        let v: Vec<u32> = match &self.data {
            TensorData::U8(v) => v.iter().map(|&x| u32::from(x)).collect(),
            TensorData::U16(v) => v.iter().map(|&x| u32::from(x)).collect(),
            TensorData::I32(v) => v.iter().map(|&x| u32::try_from(x)).collect::<Result<_, _>>().map_err(|_| data_error("negative count"))?,
            _ => return Err(data_error(format!("expected an integer tensor, got {:?}", self.dtype()))),
        };
        Ok(ArrayD::from_shape_vec(IxDyn(&self.dims), v).expect("length checked on construction"))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 4 * self.dims.len() + self.data.len() * self.dtype().size());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype() as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, Error> {
        if bytes.len() < HEADER {
            return Err(data_error(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(data_error(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(data_error(format!("unsupported version {version}")));
        }
        let dtype = DType::from_code(bytes[6]).ok_or_else(|| data_error(format!("unknown dtype code {}", bytes[6])))?;
        let rank = bytes[7] as usize;
        let dims_end = HEADER + 4 * rank;
        if bytes.len() < dims_end {
            return Err(data_error("truncated dimensions"));
        }
        let dims: Vec<usize> = bytes[HEADER..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| data_error("element count overflows"))?;
        let payload = &bytes[dims_end..];
        let expected = n.checked_mul(dtype.size()).ok_or_else(|| data_error("payload size overflows"))?;
        if payload.len() != expected {
            return Err(data_error(format!(
                "payload is {} bytes, dims {dims:?} of {dtype:?} need {expected}",
                payload.len()
            )));
        }
        let data = match dtype {
            DType::U8 => TensorData::U8(payload.to_vec()),
            DType::U16 => TensorData::U16(payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()),
            DType::I32 => TensorData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4"))).collect()),
            DType::F32 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
            DType::F64 => TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
        };
        Ok(Self { dims, data })
    }
}

fn file_error(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::File {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

pub fn read_tensor(path: &Path) -> Result<Tensor, Error> {
    let bytes = std::fs::read(path).map_err(|e| file_error(path, e))?;
    Tensor::decode(&bytes).map_err(|e| file_error(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), Error> {
    write_atomic(path, &t.encode())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], TensorData::U16(vec![1, 0x0203])).unwrap();
        assert_eq!(
            t.encode(),
            [b'F', b'B', b'V', b'T', 1, 0, 4, 2, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 3, 2]
        );
    }

    #[test]
    fn rejects_damage() {
        let good = Tensor::from_f64(&ndarray::arr1(&[1.0, 2.0])).encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(Tensor::decode(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(Tensor::decode(&bad).unwrap_err().to_string().contains("version"));
        let mut bad = good.clone();
        bad[6] = 77;
        assert!(Tensor::decode(&bad).is_err());
        assert!(Tensor::decode(&good[..good.len() - 1]).is_err());
        assert!(Tensor::decode(&good[..5]).is_err());
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![3], TensorData::U8(vec![1, 2])).is_err());
    }

    #[test]
    fn conversions() {
        let t = Tensor::new(vec![2], TensorData::I32(vec![-1, 3])).unwrap();
        assert!(t.to_counts().is_err());
        assert!(t.to_u8().is_err());
        assert_eq!(t.to_f64().as_slice().unwrap(), &[-1.0, 3.0]);
        let f = Tensor::from_f64(&ndarray::arr1(&[0.5]));
        assert!(f.to_u8().is_err());
    }
}
