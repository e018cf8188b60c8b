//! Little-endian binary container helpers shared by the backbone ("CPPB"),
//! store ("CPPS"), and stream ("CPPD") file formats.

use crate::error::{CppError, Result};
use std::io::{Read, Write};

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    Ok(())
}

/// Checks the magic bytes and returns the version for the caller to vet.
pub fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<u32> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)
        .map_err(|_| CppError::Format("file too short for magic".into()))?;
    if &got != magic {
        return Err(CppError::Format(format!(
            "bad magic {:?}, expected {:?}",
            got,
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    read_u32(r)
}

pub fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

pub fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)
        .map_err(|_| CppError::Format("truncated u8".into()))?;
    Ok(b[0])
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| CppError::Format("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| CppError::Format("truncated u64".into()))?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| CppError::Format("truncated f64".into()))?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_f64_slice<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f64_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

/// Fails if the reader still holds bytes; guards against mis-sized payloads.
pub fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(CppError::Format("trailing bytes after payload".into())),
    }
}
