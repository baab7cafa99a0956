//! Raw n-dimensional array files.
//!
//! Layout (all little-endian): magic `TWRA`, `u16` version, `u8` dtype code,
//! `u8` rank, one `u64` per dimension, then the row-major elements.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TWRA";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    U32 = 3,
}

impl DType {
    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::U8,
            3 => DType::U32,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Element types storable in a raw array.
pub trait Element: Copy {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! element {
    ($t:ty, $d:expr) => {
        impl Element for $t {
            const DTYPE: DType = $d;
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

element!(f32, DType::F32);
element!(f64, DType::F64);
element!(u8, DType::U8);
element!(u32, DType::U32);

#[derive(Debug, Clone, PartialEq)]
pub struct RawArray<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Element> RawArray<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::data(format!("dims {dims:?} do not match {} elements", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + self.data.len() * T::DTYPE.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::data(format!("raw array: {m}"));
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dtype = DType::from_code(bytes[6]).ok_or_else(|| bad("unknown dtype"))?;
        if dtype != T::DTYPE {
            return Err(bad(&format!("holds {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let rank = bytes[7] as usize;
        let header = 8 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated header"));
        }
        let dims: Vec<usize> = bytes[8..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n: usize = dims.iter().product();
        let w = dtype.size();
        if bytes.len() != header + n * w {
            return Err(bad("payload length does not match dims"));
        }
        let data = bytes[header..].chunks_exact(w).map(T::read_le).collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.encode()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = RawArray::new(vec![2, 3], vec![1.5f32, -2.0, 0.0, 3.25, 7.0, f32::MAX]).unwrap();
        assert_eq!(RawArray::<f32>::decode(&a.encode()).unwrap(), a);
        let b = RawArray::new(vec![4], vec![0u8, 1, 1, 0]).unwrap();
        assert_eq!(RawArray::<u8>::decode(&b.encode()).unwrap(), b);
    }

    #[test]
    fn rejects_wrong_dtype_and_truncation() {
        let a = RawArray::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let bytes = a.encode();
        assert!(RawArray::<f32>::decode(&bytes).is_err());
        assert!(RawArray::<f64>::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(RawArray::<f64>::decode(b"nope").is_err());
    }
}
