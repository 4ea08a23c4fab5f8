//! On-disk formats.
//!
//! * tensor files: `"PPT1"`, dtype byte (0 = f32, 1 = u32, 2 = u8), ndim
//!   byte, `ndim` little-endian u64 dims, row-major little-endian payload
//! * scans: `.bin` files of little-endian f32 `(x, y, z, r)` records and
//!   `.label` files of one u32 per point, semantic class in the low 16 bits
//!   and instance id in the high 16 bits
//! * instance banks: a directory of per-instance `.bin` files plus
//!   `manifest.json`

mod bank;
mod scan;
mod tensor_file;

use std::io::Write;
use std::path::Path;

pub use bank::{load_bank, save_bank, MANIFEST};
pub use scan::{
    decode_labels, decode_points, encode_labels, encode_points, read_scan, write_scan,
};
pub use tensor_file::{
    decode_tensor, decode_tensor_any, encode_tensor, read_tensor, read_tensor_any, write_tensor,
    AnyTensor, Element, MAGIC,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"PPT1\"")]
    BadMagic { found: Vec<u8> },

    #[error("truncated {field} at byte offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        field: &'static str,
        offset: u64,
        needed: u64,
        available: u64,
    },

    #[error("unknown dtype code {code} at byte offset 4")]
    UnknownDtype { code: u8 },

    #[error("dtype mismatch: expected {expected}, file holds {found}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("{count} trailing bytes after payload at byte offset {offset}")]
    TrailingBytes { offset: u64, count: u64 },

    #[error("tensor dims {dims:?} overflow the addressable size")]
    DimsOverflow { dims: Vec<u64> },

    #[error("count mismatch: {points} points but {labels} labels")]
    CountMismatch { points: usize, labels: usize },

    #[error("non-finite value in point {index}")]
    NonFinite { index: usize },

    #[error("point {index}: {field} {value} does not fit in 16 bits")]
    LabelOverflow {
        index: usize,
        field: &'static str,
        value: u64,
    },

    #[error("bad bank manifest: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

/// Write `bytes` to a temporary file next to `path`, then rename it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}
