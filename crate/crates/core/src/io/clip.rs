//! `TATSCLIP` raw clip files.
//!
//! Layout: 8-byte magic `TATSCLIP`, then little-endian `u32` version, `T`,
//! `C`, `H`, `W`, then `T*C*H*W` little-endian `f32` pixels in `[0, 1]`,
//! row-major `(t, c, y, x)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{read_array, read_u32};
use crate::error::{Result, TatsError};
use crate::tokenizer::ClipTensor;

pub const CLIP_MAGIC: &[u8; 8] = b"TATSCLIP";
pub const CLIP_VERSION: u32 = 1;
const KIND: &str = "TATSCLIP";

pub fn write_clip(w: &mut impl Write, clip: &ClipTensor) -> Result<()> {
    w.write_all(CLIP_MAGIC)?;
    for v in [
        CLIP_VERSION,
        clip.frames as u32,
        clip.channels as u32,
        clip.height as u32,
        clip.width as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for p in &clip.pixels {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_clip(r: &mut impl Read) -> Result<ClipTensor> {
    if &read_array::<8>(r, KIND)? != CLIP_MAGIC {
        return Err(TatsError::format(KIND, "bad magic"));
    }
    let version = read_u32(r, KIND)?;
    if version != CLIP_VERSION {
        return Err(TatsError::format(
            KIND,
            format!("unsupported version {version}"),
        ));
    }
    let dims = [
        read_u32(r, KIND)?,
        read_u32(r, KIND)?,
        read_u32(r, KIND)?,
        read_u32(r, KIND)?,
    ];
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
    let n = n
        .filter(|&n| n > 0)
        .ok_or_else(|| TatsError::format(KIND, format!("bad dimensions {dims:?}")))?;
    let mut pixels = Vec::with_capacity(n);
    for i in 0..n {
        let p = f32::from_le_bytes(read_array::<4>(r, KIND)?);
        if !(0.0..=1.0).contains(&p) {
            return Err(TatsError::format(
                KIND,
                format!("pixel {i} = {p} outside [0, 1]"),
            ));
        }
        pixels.push(p);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(TatsError::format(KIND, "trailing bytes after pixel data"));
    }
    ClipTensor::new(
        dims[0] as usize,
        dims[1] as usize,
        dims[2] as usize,
        dims[3] as usize,
        pixels,
    )
}

pub fn save_clip(path: &Path, clip: &ClipTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_clip(&mut w, clip)?;
    w.flush()?;
    Ok(())
}

pub fn load_clip(path: &Path) -> Result<ClipTensor> {
    read_clip(&mut BufReader::new(File::open(path)?))
}
