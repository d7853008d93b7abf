//! WTN1 tensor files.
//!
//! Layout (little-endian, no padding, no trailing bytes):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `57 54 4E 31` ("WTN1")  |
//! | 4      | 2    | version, u16 = 1              |
//! | 6      | 1    | dtype, 0 = f32, 1 = f64       |
//! | 7      | 1    | reserved, must be 0           |
//! | 8      | 8    | rows, u64                     |
//! | 16     | 8    | cols, u64                     |
//! | 24     | ...  | rows × cols values, row-major |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Matrix};

pub const MAGIC: [u8; 4] = *b"WTN1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

pub fn encode(m: &Matrix, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * dtype.size_of());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(0);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    match dtype {
        Dtype::F32 => {
            for v in m.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Matrix, Dtype)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(bytes[6])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[6])))?;
    if bytes[7] != 0 {
        return Err(Error::Format(format!("reserved byte is {}, expected 0", bytes[7])));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8-byte slice"));
    let payload_len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size_of() as u64))
        .filter(|&n| n <= usize::MAX as u64)
        .ok_or_else(|| Error::Format(format!("{rows}x{cols} payload size overflows")))?
        as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != payload_len {
        return Err(Error::Format(format!(
            "{rows}x{cols} {dtype:?} payload needs {payload_len} bytes, found {}",
            payload.len()
        )));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    let m = Matrix::new(rows as usize, cols as usize, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((m, dtype))
}

pub fn write(path: &Path, m: &Matrix, dtype: Dtype) -> Result<()> {
    let bytes = encode(m, dtype);
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    f.sync_all()
        .map_err(|e| Error::io(format!("sync {}", path.display()), e))
}

pub fn read(path: &Path) -> Result<(Matrix, Dtype)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    decode(&bytes)
}
