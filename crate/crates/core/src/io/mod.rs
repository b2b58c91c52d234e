//! On-disk formats: raw clips, checkpoints and netpbm images.

pub mod checkpoint;
pub mod clip;
pub mod pnm;

use std::io::Read;

use crate::error::{Result, TatsError};

pub(crate) fn read_array<const N: usize>(r: &mut impl Read, kind: &'static str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TatsError::format(kind, "unexpected end of file"),
        _ => TatsError::Io(e),
    })?;
    Ok(buf)
}

pub(crate) fn read_u32(r: &mut impl Read, kind: &'static str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array::<4>(r, kind)?))
}

pub(crate) fn read_u64(r: &mut impl Read, kind: &'static str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array::<8>(r, kind)?))
}

pub(crate) fn read_f64(r: &mut impl Read, kind: &'static str) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array::<8>(r, kind)?))
}
