//! Image export of sampling probabilities, attention heatmaps and masks.
//!
//! Token-level images hold one panel per temporal slice, laid out left to
//! right. Each token becomes a `patch_h x patch_w` cell, and cell values are
//! quantized as `round(255 * v / max(v))`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, TatsError};
use crate::io::pnm::Image;
use crate::sampler::{MaskSpec, PolicyOutput};
use crate::tokenizer::{ClipTensor, TokenizerConfig};

/// 8-bit levels for `values`, scaled so the maximum maps to 255. All-zero
/// input stays black.
pub fn quantize(values: &[f64]) -> Result<Vec<u8>> {
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(TatsError::invalid(format!("cannot quantize value {v}")));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    Ok(values
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (255.0 * v / max).round() as u8
            } else {
                0
            }
        })
        .collect())
}

/// Grayscale image of one value per token, `grid = (T', H', W')`.
pub fn token_grid_image(
    values: &[f64],
    grid: (usize, usize, usize),
    patch: (usize, usize),
) -> Result<Image> {
    let (gt, gh, gw) = grid;
    if values.len() != gt * gh * gw {
        return Err(TatsError::shape(
            "token_grid_image",
            format!("{} values for grid {grid:?}", values.len()),
        ));
    }
    let levels = quantize(values)?;
    let (ph, pw) = patch;
    let mut img = Image::new(gt * gw * pw, gh * ph, 1);
    for t in 0..gt {
        for gy in 0..gh {
            for gx in 0..gw {
                let q = levels[(t * gh + gy) * gw + gx];
                for y in gy * ph..(gy + 1) * ph {
                    for x in 0..pw {
                        img.set(t * gw * pw + gx * pw + x, y, &[q]);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Cell-level inverse of [`token_grid_image`]: the level of every token cell.
pub fn read_token_levels(
    img: &Image,
    grid: (usize, usize, usize),
    patch: (usize, usize),
) -> Result<Vec<u8>> {
    let (gt, gh, gw) = grid;
    if img.channels != 1 || img.width != gt * gw * patch.1 || img.height != gh * patch.0 {
        return Err(TatsError::shape(
            "read_token_levels",
            format!("{}x{} image for grid {grid:?}", img.width, img.height),
        ));
    }
    let mut out = Vec::with_capacity(gt * gh * gw);
    for t in 0..gt {
        for gy in 0..gh {
            for gx in 0..gw {
                out.push(img.get(t * gw * patch.1 + gx * patch.1, gy * patch.0)[0]);
            }
        }
    }
    Ok(out)
}

/// Binary mask image: visible cells white, masked cells black.
pub fn mask_image(
    mask: &MaskSpec,
    grid: (usize, usize, usize),
    patch: (usize, usize),
) -> Result<Image> {
    let mut v = vec![0.0; mask.tokens];
    mask.visible.iter().for_each(|&i| v[i] = 1.0);
    token_grid_image(&v, grid, patch)
}

/// RGB frames side by side, with the pixels of masked tubelets blacked out.
/// Single-channel clips are shown as gray.
pub fn masked_frames_image(
    clip: &ClipTensor,
    cfg: &TokenizerConfig,
    mask: &MaskSpec,
) -> Result<Image> {
    let (gt, gh, gw) = cfg.grid(clip.frames, clip.height, clip.width)?;
    if mask.tokens != gt * gh * gw {
        return Err(TatsError::shape(
            "masked_frames_image",
            format!(
                "mask over {} tokens, clip has {}",
                mask.tokens,
                gt * gh * gw
            ),
        ));
    }
    if clip.channels != 1 && clip.channels != 3 {
        return Err(TatsError::invalid(format!(
            "cannot render {}-channel frames",
            clip.channels
        )));
    }
    let mut visible = vec![false; mask.tokens];
    mask.visible.iter().for_each(|&i| visible[i] = true);
    let mut img = Image::new(clip.frames * clip.width, clip.height, 3);
    for f in 0..clip.frames {
        for y in 0..clip.height {
            for x in 0..clip.width {
                let tok = ((f / cfg.tubelet) * gh + y / cfg.patch_h) * gw + x / cfg.patch_w;
                let mut px = [0u8; 3];
                if visible[tok] {
                    for (c, p) in px.iter_mut().enumerate() {
                        let v = clip.at(f, c.min(clip.channels - 1), y, x);
                        *p = (255.0 * v.clamp(0.0, 1.0)).round() as u8;
                    }
                }
                img.set(f * clip.width + x, y, &px);
            }
        }
    }
    Ok(img)
}

/// Files written by [`export_visualization`].
#[derive(Clone, Debug, PartialEq)]
pub struct VisualizationFiles {
    pub probabilities: PathBuf,
    pub mask: PathBuf,
    pub frames: PathBuf,
    pub heatmap: Option<PathBuf>,
}

/// Writes `probs.pgm`, `mask.pgm`, `frames.ppm` and, when given, `heatmap.pgm`
/// into `dir`, creating it if needed.
pub fn export_visualization(
    dir: &Path,
    clip: &ClipTensor,
    cfg: &TokenizerConfig,
    policy: &PolicyOutput,
    mask: &MaskSpec,
    heatmap: Option<&[f64]>,
) -> Result<VisualizationFiles> {
    let grid = cfg.grid(clip.frames, clip.height, clip.width)?;
    let patch = (cfg.patch_h, cfg.patch_w);
    fs::create_dir_all(dir)?;
    let probabilities = dir.join("probs.pgm");
    token_grid_image(&policy.probs, grid, patch)?.save(&probabilities)?;
    let mask_path = dir.join("mask.pgm");
    mask_image(mask, grid, patch)?.save(&mask_path)?;
    let frames = dir.join("frames.ppm");
    masked_frames_image(clip, cfg, mask)?.save(&frames)?;
    let heatmap = match heatmap {
        Some(h) => {
            let p = dir.join("heatmap.pgm");
            token_grid_image(h, grid, patch)?.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(VisualizationFiles {
        probabilities,
        mask: mask_path,
        frames,
        heatmap,
    })
}
