//! Fixed 3D sinusoidal positional encoding.
//!
//! The embedding width is split into three even sub-bands for the temporal,
//! vertical and horizontal grid indices. Each sub-band is a standard 1D
//! encoding laid out as `[sin(p w_0), .., sin(p w_{m/2-1}), cos(p w_0), ..]`
//! with `w_i = 10000^(-2i/m)`. When `d` is not a multiple of six the temporal
//! band takes the remainder.

use crate::error::{Result, TatsError};

/// Grid position of one token: (temporal, vertical, horizontal) index.
pub type GridCoord = (usize, usize, usize);

/// Widths of the (t, h, w) sub-bands for embedding width `d`.
pub fn band_widths(d: usize) -> Result<[usize; 3]> {
    let base = 2 * (d / 6);
    if d % 2 != 0 || base == 0 {
        return Err(TatsError::invalid(format!(
            "positional encoding width {d} must be even and at least 6"
        )));
    }
    Ok([d - 2 * base, base, base])
}

fn encode_1d(pos: usize, width: usize, out: &mut [f64]) {
    let half = width / 2;
    for i in 0..half {
        let omega = 10000f64.powf(-(2.0 * i as f64) / width as f64);
        let a = pos as f64 * omega;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
}

/// Row-major `coords.len() x d` encoding.
pub fn positional_encoding(coords: &[GridCoord], d: usize) -> Result<Vec<f64>> {
    let bands = band_widths(d)?;
    let mut out = vec![0.0; coords.len() * d];
    for (row, &(t, h, w)) in out.chunks_mut(d).zip(coords) {
        let (bt, rest) = row.split_at_mut(bands[0]);
        let (bh, bw) = rest.split_at_mut(bands[1]);
        encode_1d(t, bands[0], bt);
        encode_1d(h, bands[1], bh);
        encode_1d(w, bands[2], bw);
    }
    Ok(out)
}

/// Row-major grid coordinates for a `(gt, gh, gw)` token grid, t outermost.
pub fn grid_coords(gt: usize, gh: usize, gw: usize) -> Vec<GridCoord> {
    let mut v = Vec::with_capacity(gt * gh * gw);
    for t in 0..gt {
        for h in 0..gh {
            for w in 0..gw {
                v.push((t, h, w));
            }
        }
    }
    v
}
