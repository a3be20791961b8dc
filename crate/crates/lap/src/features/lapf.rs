//! The LAPF binary tensor file format.
//!
//! A LAPF file is a single dense row-major matrix with a fixed 24-byte
//! header:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic bytes `"LAPF"`       |
//! | 4      | 4    | format version, u32 LE = 1 |
//! | 8      | 4    | rows, u32 LE               |
//! | 12     | 4    | cols, u32 LE               |
//! | 16     | 4    | dtype, u32 LE (0 = f32)    |
//! | 20     | 4    | reserved, u32 LE = 0       |
//!
//! followed by `rows * cols` little-endian IEEE-754 values in row-major
//! order. Feature files always use dtype 0 (f32).

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{LapError, Result};
use crate::ioutil::atomic_write;

pub const MAGIC: [u8; 4] = *b"LAPF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LapfHeader {
    pub rows: usize,
    pub cols: usize,
    pub dtype: u32,
}

fn read_u32(buf: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(buf[offset..offset + 4].try_into().unwrap())
}

fn parse_header(path: &Path, buf: &[u8]) -> Result<LapfHeader> {
    if buf.len() < HEADER_LEN {
        return Err(LapError::malformed(path, "file shorter than LAPF header"));
    }
    if buf[..4] != MAGIC {
        return Err(LapError::malformed(path, "bad magic, expected \"LAPF\""));
    }
    let version = read_u32(buf, 4);
    if version != VERSION {
        return Err(LapError::malformed(
            path,
            format!("unsupported format version {version}"),
        ));
    }
    let rows = read_u32(buf, 8) as usize;
    let cols = read_u32(buf, 12) as usize;
    let dtype = read_u32(buf, 16);
    if dtype != DTYPE_F32 {
        return Err(LapError::malformed(path, format!("unsupported dtype {dtype}")));
    }
    if rows == 0 || cols == 0 {
        return Err(LapError::malformed(path, "empty matrix (zero rows or cols)"));
    }
    Ok(LapfHeader { rows, cols, dtype })
}

/// Read only the header of a LAPF file.
pub fn read_header(path: &Path) -> Result<LapfHeader> {
    let mut buf = [0u8; HEADER_LEN];
    let mut file = fs::File::open(path).map_err(|e| LapError::io(path, e))?;
    std::io::Read::read_exact(&mut file, &mut buf)
        .map_err(|_| LapError::malformed(path, "file shorter than LAPF header"))?;
    parse_header(path, &buf)
}

/// Read a whole LAPF file into an `f64` matrix (values are stored as f32).
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let buf = fs::read(path).map_err(|e| LapError::io(path, e))?;
    let header = parse_header(path, &buf)?;
    let expected = HEADER_LEN + header.rows * header.cols * 4;
    if buf.len() != expected {
        return Err(LapError::malformed(
            path,
            format!(
                "payload length mismatch: {} rows x {} cols needs {} bytes, file has {}",
                header.rows,
                header.cols,
                expected,
                buf.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(header.rows * header.cols);
    for chunk in buf[HEADER_LEN..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Array2::from_shape_vec((header.rows, header.cols), data)
        .map_err(|e| LapError::malformed(path, e.to_string()))
}

/// Write a matrix as a LAPF file, narrowing values to f32.
pub fn write_matrix(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let (rows, cols) = matrix.dim();
    if rows == 0 || cols == 0 {
        return Err(LapError::invalid("refusing to write an empty matrix"));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for &x in matrix.iter() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    atomic_write(path, &buf)
}

/// Round every entry to the nearest f32, in place. Generated features pass
/// through this so in-memory data matches what a LAPF round trip yields.
pub fn quantize_to_f32(matrix: &mut Array2<f64>) {
    matrix.mapv_inplace(|x| x as f32 as f64);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lapf");
        let mut m = array![[1.0, 2.5, -3.25], [0.1, 0.0, 1e-8]];
        quantize_to_f32(&mut m);
        write_matrix(&path, &m).unwrap();
        let header = read_header(&path).unwrap();
        assert_eq!((header.rows, header.cols), (2, 3));
        let back = read_matrix(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.lapf");
        fs::write(&path, b"NOPE00000000000000000000").unwrap();
        let err = read_header(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.lapf");
        let m = array![[1.0f64, 2.0], [3.0, 4.0]];
        write_matrix(&path, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_matrix(&path).is_err());
        // Header alone still parses.
        assert!(read_header(&path).is_ok());
    }

    #[test]
    fn rejects_wrong_version_and_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.lapf");
        let m = array![[1.0f64]];
        write_matrix(&path, &m).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(read_header(&path).unwrap_err().to_string().contains("version"));

        write_matrix(&path, &m).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[16] = 7;
        fs::write(&path, &bytes).unwrap();
        assert!(read_header(&path).unwrap_err().to_string().contains("dtype"));
    }
}
