//! Binary matrix format: four magic bytes, one version byte, `u32` rows, `u32` cols
//! (little-endian), then `rows * cols` little-endian `f64` in row-major order.

use std::io::{Read, Write};

use super::{LinalgError, Matrix};

pub const MATRIX_MAGIC: &[u8; 4] = &[0x55, 0x4d, 0x45, 0x44];
pub const MATRIX_FORMAT_VERSION: u8 = 1;

pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<(), LinalgError> {
    let rows = u32::try_from(m.rows()).map_err(|_| LinalgError::Format("too many rows".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| LinalgError::Format("too many cols".into()))?;
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&[MATRIX_FORMAT_VERSION])?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.as_slice().len() * 8);
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix, LinalgError> {
    let mut header = [0u8; 13];
    r.read_exact(&mut header).map_err(truncated)?;
    if &header[..4] != MATRIX_MAGIC {
        return Err(LinalgError::Format(format!(
            "bad magic {:?}, expected {:?}",
            &header[..4],
            MATRIX_MAGIC
        )));
    }
    if header[4] != MATRIX_FORMAT_VERSION {
        return Err(LinalgError::Format(format!(
            "matrix format version {} (supported: {})",
            header[4], MATRIX_FORMAT_VERSION
        )));
    }
    let rows = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| LinalgError::Format(format!("implausible shape {rows}x{cols}")))?;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn truncated(e: std::io::Error) -> LinalgError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        LinalgError::Format("truncated matrix data".into())
    } else {
        LinalgError::Io(e)
    }
}
