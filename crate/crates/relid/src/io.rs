//! Little-endian binary primitives shared by the on-disk model formats.
//!
//! Every artifact starts with a four-byte ASCII magic tag and a u16 format
//! version. Payload floats are 32-bit little-endian; readers reject files
//! with the wrong magic, a truncated payload, or trailing bytes.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u16 = 1;

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    w.write_u16::<LE>(FORMAT_VERSION)?;
    Ok(())
}

pub fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4], path: &Path) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)
        .map_err(|_| Error::bad_file(path, "truncated header"))?;
    if &got != magic {
        return Err(Error::bad_file(
            path,
            format!(
                "magic mismatch: expected {:?}, got {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&got)
            ),
        ));
    }
    let version = r
        .read_u16::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(Error::bad_file(
            path,
            format!("unsupported format version {version}"),
        ));
    }
    Ok(())
}

/// Converts a usize dimension to u32, rejecting overflow instead of
/// silently wrapping.
pub fn dim_u32(n: usize, what: &str, path: &Path) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::bad_file(path, format!("{what} overflows u32: {n}")))
}

pub fn write_f32_slice<W: Write>(w: &mut W, values: impl IntoIterator<Item = f32>) -> Result<()> {
    for v in values {
        w.write_f32::<LE>(v)?;
    }
    Ok(())
}

pub fn read_f32_vec<R: Read>(r: &mut R, n: usize, path: &Path) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LE>(&mut out)
        .map_err(|_| Error::bad_file(path, "truncated float payload"))?;
    Ok(out)
}

/// Writes an f64 matrix as f32 row-major.
pub fn write_matrix_f32<W: Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    write_f32_slice(w, m.iter().map(|&v| v as f32))
}

pub fn read_matrix_f32<R: Read>(
    r: &mut R,
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<Array2<f64>> {
    let flat = read_f32_vec(r, rows.checked_mul(cols).ok_or_else(|| {
        Error::bad_file(path, format!("matrix size {rows}x{cols} overflows"))
    })?, path)?;
    let flat: Vec<f64> = flat.into_iter().map(f64::from).collect();
    Array2::from_shape_vec((rows, cols), flat)
        .map_err(|e| Error::bad_file(path, format!("bad matrix shape: {e}")))
}

pub fn write_vector_f32<W: Write>(w: &mut W, v: &Array1<f64>) -> Result<()> {
    write_f32_slice(w, v.iter().map(|&x| x as f32))
}

pub fn read_vector_f32<R: Read>(r: &mut R, n: usize, path: &Path) -> Result<Array1<f64>> {
    let flat = read_f32_vec(r, n, path)?;
    Ok(Array1::from_iter(flat.into_iter().map(f64::from)))
}

/// Errors unless the reader is exactly at end of file.
pub fn expect_eof<R: Read>(r: &mut R, path: &Path) -> Result<()> {
    let mut buf = [0u8; 1];
    match r.read(&mut buf)? {
        0 => Ok(()),
        _ => Err(Error::bad_file(path, "trailing bytes after payload")),
    }
}

/// Stable 64-bit FNV-1a, used to derive per-item RNG streams from string ids.
pub fn fnv1a64(data: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in data {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn magic_round_trip() {
        let mut buf = Vec::new();
        write_magic(&mut buf, b"RLID").unwrap();
        let mut c = Cursor::new(buf);
        check_magic(&mut c, b"RLID", Path::new("x")).unwrap();
    }

    #[test]
    fn magic_mismatch_is_rejected() {
        let mut buf = Vec::new();
        write_magic(&mut buf, b"RGMM").unwrap();
        let mut c = Cursor::new(buf);
        let err = check_magic(&mut c, b"RLID", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("magic mismatch"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut buf = Vec::new();
        write_f32_slice(&mut buf, [1.0f32, 2.0]).unwrap();
        buf.pop();
        let mut c = Cursor::new(buf);
        assert!(read_f32_vec(&mut c, 2, Path::new("x")).is_err());
    }

    #[test]
    fn fnv_is_stable() {
        // Reference value from the published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
