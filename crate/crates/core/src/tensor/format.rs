//! The SCE1 binary format.
//!
//! ```text
//! 0..4    magic "SCE1"
//! 4       dtype: 0 = f32, 1 = f64, 2 = u32 (token indices)
//! 5..8    zero
//! 8..16   rows, u64 little-endian
//! 16..24  cols, u64 little-endian
//! 24..28  zero
//! 28..    row-major little-endian payload
//! ```
//!
//! Token sequences use dtype 2 with `cols == 1`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DenseMatrix, TokenSequence};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SCE1";
const HEADER_LEN: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U32 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
        }
    }
}

fn header(dtype: Dtype, rows: usize, cols: usize) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(MAGIC);
    h[4] = dtype.code();
    h[8..16].copy_from_slice(&(rows as u64).to_le_bytes());
    h[16..24].copy_from_slice(&(cols as u64).to_le_bytes());
    h
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.flush().map_err(io)
}

struct Parsed<'a> {
    dtype: Dtype,
    rows: usize,
    cols: usize,
    payload: &'a [u8],
}

fn parse<'a>(path: &Path, bytes: &'a [u8]) -> Result<Parsed<'a>> {
    let bad = |reason: &str| Error::BadHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let k = bytes.len().min(4);
        found[..k].copy_from_slice(&bytes[..k]);
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let dtype = Dtype::from_code(bytes[4]).ok_or(Error::BadDtype {
        path: path.to_path_buf(),
        dtype: bytes[4],
    })?;
    if bytes[5..8] != [0; 3] || bytes[24..28] != [0; 4] {
        return Err(bad("reserved bytes are not zero"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.width() as u64))
        .ok_or_else(|| bad("rows * cols overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    let found = payload.len() as u64;
    if found < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Parsed {
        dtype,
        rows: rows as usize,
        cols: cols as usize,
        payload,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `m` as 64-bit floats.
pub fn save_matrix(m: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
    save_matrix_as(m, path, Dtype::F64)
}

/// Writes `m` with the given float dtype. `F32` rounds each entry.
pub fn save_matrix_as(m: &DenseMatrix, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(HEADER_LEN + m.as_slice().len() * dtype.width());
    bytes.extend_from_slice(&header(dtype, m.rows(), m.cols()));
    match dtype {
        Dtype::F64 => m.as_slice().iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        Dtype::F32 => m
            .as_slice()
            .iter()
            .for_each(|&x| bytes.extend_from_slice(&(x as f32).to_le_bytes())),
        Dtype::U32 => {
            return Err(Error::BadDtype {
                path: path.to_path_buf(),
                dtype: Dtype::U32.code(),
            })
        }
    }
    write_file(path, &bytes)
}

/// Reads an SCE1 float matrix, widening f32 payloads to f64.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let p = parse(path, &bytes)?;
    let data: Vec<f64> = match p.dtype {
        Dtype::F64 => p
            .payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        Dtype::F32 => p
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        Dtype::U32 => {
            return Err(Error::BadDtype {
                path: path.to_path_buf(),
                dtype: p.dtype.code(),
            })
        }
    };
    if let Some(index) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            path: path.to_path_buf(),
            index,
        });
    }
    DenseMatrix::new(p.rows, p.cols, data)
}

/// Writes targets as dtype 2, `rows = N`, `cols = 1`. The ignore mask is not stored.
pub fn save_tokens(x: &TokenSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * x.len());
    bytes.extend_from_slice(&header(Dtype::U32, x.len(), 1));
    x.targets().iter().for_each(|t| bytes.extend_from_slice(&t.to_le_bytes()));
    write_file(path.as_ref(), &bytes)
}

pub fn load_tokens(path: impl AsRef<Path>) -> Result<TokenSequence> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let p = parse(path, &bytes)?;
    if p.dtype != Dtype::U32 {
        return Err(Error::BadDtype {
            path: path.to_path_buf(),
            dtype: p.dtype.code(),
        });
    }
    if p.cols != 1 {
        return Err(Error::BadHeader {
            path: path.to_path_buf(),
            reason: format!("token file must have cols = 1, found {}", p.cols),
        });
    }
    let targets = p
        .payload
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(TokenSequence::new(targets))
}
