//! Minimal reader for MATLAB level-5 MAT files holding a single numeric
//! matrix, as shipped in the MARS `info/` directory. Little-endian only;
//! compressed (v7) and uncompressed elements are both accepted.

use std::io::Read;
use std::path::Path;

use flate2::read::ZlibDecoder;

use crate::{Error, Result};

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

/// A dense real matrix, stored row-major after decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// All values in storage order, for vectors of either orientation.
    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

struct Element<'a> {
    kind: u32,
    payload: &'a [u8],
    next: usize,
}

fn u32_at(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::validation("truncated MAT element"))
}

fn element(buf: &[u8], at: usize) -> Result<Element<'_>> {
    let tag = u32_at(buf, at)?;
    if tag >> 16 != 0 {
        // small data element: 4-byte tag, 4-byte payload
        let len = (tag >> 16) as usize;
        let payload = buf
            .get(at + 4..at + 4 + len)
            .ok_or_else(|| Error::validation("truncated MAT element"))?;
        return Ok(Element {
            kind: tag & 0xffff,
            payload,
            next: at + 8,
        });
    }
    let len = u32_at(buf, at + 4)? as usize;
    let payload = buf
        .get(at + 8..at + 8 + len)
        .ok_or_else(|| Error::validation("truncated MAT element"))?;
    let padded = if tag == MI_COMPRESSED { len } else { len.div_ceil(8) * 8 };
    Ok(Element {
        kind: tag,
        payload,
        next: at + 8 + padded,
    })
}

fn numeric(kind: u32, bytes: &[u8]) -> Result<Vec<f64>> {
    macro_rules! decode {
        ($t:ty) => {
            bytes
                .chunks_exact(std::mem::size_of::<$t>())
                .map(|c| <$t>::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
    }
    Ok(match kind {
        MI_INT8 => decode!(i8),
        MI_UINT8 => decode!(u8),
        MI_INT16 => decode!(i16),
        MI_UINT16 => decode!(u16),
        MI_INT32 => decode!(i32),
        MI_UINT32 => decode!(u32),
        MI_SINGLE => decode!(f32),
        MI_DOUBLE => decode!(f64),
        MI_INT64 => decode!(i64),
        MI_UINT64 => decode!(u64),
        other => {
            return Err(Error::validation(format!(
                "unsupported MAT numeric type {other}"
            )))
        }
    })
}

fn parse_matrix(body: &[u8]) -> Result<Matrix> {
    let flags = element(body, 0)?;
    let dims = element(body, flags.next)?;
    let name = element(body, dims.next)?;
    let real = element(body, name.next)?;
    let dims = numeric(dims.kind, dims.payload)?;
    if dims.len() != 2 {
        return Err(Error::validation(format!(
            "expected a 2-D MAT matrix, found {} dimensions",
            dims.len()
        )));
    }
    let (rows, cols) = (dims[0] as usize, dims[1] as usize);
    let col_major = numeric(real.kind, real.payload)?;
    if col_major.len() != rows * cols {
        return Err(Error::validation("MAT matrix size does not match its dimensions"));
    }
    let mut data = vec![0.0; rows * cols];
    for c in 0..cols {
        for r in 0..rows {
            data[r * cols + c] = col_major[c * rows + r];
        }
    }
    Ok(Matrix { rows, cols, data })
}

/// Decode the first numeric matrix found in a MAT-file image.
pub fn parse_first_matrix(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 128 {
        return Err(Error::validation("MAT file shorter than its header"));
    }
    if &bytes[126..128] != b"IM" {
        return Err(Error::validation("only little-endian MAT files are supported"));
    }
    let mut at = 128;
    while at < bytes.len() {
        let el = element(bytes, at)?;
        match el.kind {
            MI_MATRIX => return parse_matrix(el.payload),
            MI_COMPRESSED => {
                let mut inflated = Vec::new();
                ZlibDecoder::new(el.payload)
                    .read_to_end(&mut inflated)
                    .map_err(|e| Error::validation(format!("corrupt compressed MAT element: {e}")))?;
                let inner = element(&inflated, 0)?;
                if inner.kind == MI_MATRIX {
                    return parse_matrix(inner.payload);
                }
            }
            _ => {}
        }
        at = el.next;
    }
    Err(Error::validation("no numeric matrix in MAT file"))
}

pub fn read_first_matrix(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_first_matrix(&bytes)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

/// Whitespace or comma separated numeric table, one row per line.
pub fn read_text_matrix(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::validation(format!("{}:{}: {e}", path.display(), n + 1)))?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::validation(format!(
                    "{}:{}: ragged row",
                    path.display(),
                    n + 1
                )))
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    Ok(Matrix {
        rows,
        cols: cols.unwrap_or(0),
        data,
    })
}
