use std::path::Path;

use super::{read_bytes, write_atomic, FormatError};
use crate::error::Result;
use crate::tensor::BevTensor;

pub const MAGIC: &[u8; 4] = b"PPT1";

/// Scalar types storable in a tensor file.
pub trait Element: Copy + Send + Sync + 'static {
    const DTYPE: u8;
    const NAME: &'static str;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

macro_rules! element {
    ($t:ty, $code:expr, $name:expr) => {
        impl Element for $t {
            const DTYPE: u8 = $code;
            const NAME: &'static str = $name;
            const SIZE: usize = std::mem::size_of::<$t>();

            fn put(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn get(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

element!(f32, 0, "f32");
element!(u32, 1, "u32");
element!(u8, 2, "u8");

fn dtype_name(code: u8) -> &'static str {
    match code {
        0 => f32::NAME,
        1 => u32::NAME,
        2 => u8::NAME,
        _ => "unknown",
    }
}

/// A decoded tensor of whichever dtype the file declared.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(BevTensor<f32>),
    U32(BevTensor<u32>),
    U8(BevTensor<u8>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::U32(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            AnyTensor::F32(_) => f32::NAME,
            AnyTensor::U32(_) => u32::NAME,
            AnyTensor::U8(_) => u8::NAME,
        }
    }
}

pub fn encode_tensor<T: Element>(t: &BevTensor<T>) -> Vec<u8> {
    let shape = t.shape();
    assert!(shape.len() <= u8::MAX as usize, "tensor rank exceeds 255");
    let mut out = Vec::with_capacity(6 + 8 * shape.len() + T::SIZE * t.data().len());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.put(&mut out);
    }
    out
}

struct Header {
    dtype: u8,
    dims: Vec<usize>,
    payload_offset: usize,
    count: usize,
}

fn take<'a>(bytes: &'a [u8], offset: usize, len: usize, field: &'static str) -> Result<&'a [u8], FormatError> {
    bytes
        .get(offset..offset.saturating_add(len))
        .ok_or(FormatError::Truncated {
            field,
            offset: offset as u64,
            needed: len as u64,
            available: bytes.len().saturating_sub(offset) as u64,
        })
}

fn parse_header(bytes: &[u8]) -> Result<Header, FormatError> {
    let magic = take(bytes, 0, 4, "magic")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let dtype = take(bytes, 4, 1, "dtype")?[0];
    let size = match dtype {
        0 | 1 => 4,
        2 => 1,
        code => return Err(FormatError::UnknownDtype { code }),
    };
    let ndim = take(bytes, 5, 1, "ndim")?[0] as usize;
    let raw = take(bytes, 6, 8 * ndim, "dims")?;
    let dims64: Vec<u64> = raw
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let overflow = || FormatError::DimsOverflow {
        dims: dims64.clone(),
    };
    let mut count: usize = 1;
    let mut dims = Vec::with_capacity(ndim);
    for &d in &dims64 {
        let d = usize::try_from(d).map_err(|_| overflow())?;
        count = count.checked_mul(d).ok_or_else(overflow)?;
        dims.push(d);
    }
    let payload_offset = 6 + 8 * ndim;
    let payload = count.checked_mul(size).ok_or_else(overflow)?;
    take(bytes, payload_offset, payload, "payload")?;
    let end = payload_offset + payload;
    if bytes.len() > end {
        return Err(FormatError::TrailingBytes {
            offset: end as u64,
            count: (bytes.len() - end) as u64,
        });
    }
    Ok(Header {
        dtype,
        dims,
        payload_offset,
        count,
    })
}

fn payload<T: Element>(bytes: &[u8], h: Header) -> BevTensor<T> {
    let data = bytes[h.payload_offset..h.payload_offset + h.count * T::SIZE]
        .chunks_exact(T::SIZE)
        .map(T::get)
        .collect();
    BevTensor::new(h.dims, data).expect("header count matches payload")
}

pub fn decode_tensor<T: Element>(bytes: &[u8]) -> Result<BevTensor<T>, FormatError> {
    let h = parse_header(bytes)?;
    if h.dtype != T::DTYPE {
        return Err(FormatError::DtypeMismatch {
            expected: T::NAME,
            found: dtype_name(h.dtype),
        });
    }
    Ok(payload(bytes, h))
}

pub fn decode_tensor_any(bytes: &[u8]) -> Result<AnyTensor, FormatError> {
    let h = parse_header(bytes)?;
    Ok(match h.dtype {
        0 => AnyTensor::F32(payload(bytes, h)),
        1 => AnyTensor::U32(payload(bytes, h)),
        _ => AnyTensor::U8(payload(bytes, h)),
    })
}

pub fn read_tensor<T: Element>(path: &Path) -> Result<BevTensor<T>> {
    Ok(decode_tensor(&read_bytes(path)?)?)
}

pub fn read_tensor_any(path: &Path) -> Result<AnyTensor> {
    Ok(decode_tensor_any(&read_bytes(path)?)?)
}

pub fn write_tensor<T: Element>(path: &Path, t: &BevTensor<T>) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}
