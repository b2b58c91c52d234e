//! Tubelet tokenization of video clips and per-patch normalized targets.

use crate::error::{Result, TatsError};
use crate::optim::ParamStore;
use crate::posenc::{grid_coords, positional_encoding, GridCoord};
use crate::tensor::{DiffTensor, Tape, Var};

/// A clip of `frames x channels x height x width` pixels in `[0, 1]`,
/// stored row-major in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTensor {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ClipTensor {
    pub fn new(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        let n = frames * channels * height * width;
        if pixels.len() != n {
            return Err(TatsError::invalid(format!(
                "clip {frames}x{channels}x{height}x{width} needs {n} pixels, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            frames,
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            channels,
            height,
            width,
            pixels: vec![0.0; frames * channels * height * width],
        }
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * self.channels + c) * self.height + y) * self.width + x
    }

    pub fn at(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[self.index(t, c, y, x)]
    }
}

/// Non-overlapping tubelet geometry plus embedding width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub channels: usize,
    pub tubelet: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub embed_dim: usize,
}

impl TokenizerConfig {
    /// Pixel count of one tubelet, `C * t * h * w`.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.tubelet * self.patch_h * self.patch_w
    }

    /// Token grid extents `(T/t, H/h, W/w)` for a clip shape.
    pub fn grid(
        &self,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<(usize, usize, usize)> {
        for (axis, len, k) in [
            ("frames", frames, self.tubelet),
            ("height", height, self.patch_h),
            ("width", width, self.patch_w),
        ] {
            if k == 0 || len % k != 0 || len == 0 {
                return Err(TatsError::invalid(format!(
                    "{axis} extent {len} is not divisible by tubelet extent {k}"
                )));
            }
        }
        Ok((
            frames / self.tubelet,
            height / self.patch_h,
            width / self.patch_w,
        ))
    }

    pub fn num_tokens(&self, frames: usize, height: usize, width: usize) -> Result<usize> {
        let (a, b, c) = self.grid(frames, height, width)?;
        Ok(a * b * c)
    }

    fn check_clip(&self, clip: &ClipTensor) -> Result<(usize, usize, usize)> {
        if clip.channels != self.channels {
            return Err(TatsError::invalid(format!(
                "channels extent {} does not match tokenizer channels {}",
                clip.channels, self.channels
            )));
        }
        self.grid(clip.frames, clip.height, clip.width)
    }
}

/// Embedded tokens and their grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: DiffTensor,
    pub coords: Vec<GridCoord>,
    pub grid: (usize, usize, usize),
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Flattens every tubelet into a row of `C*t*h*w` pixels ordered
/// `(c, dt, dy, dx)`; rows follow the grid, t outermost.
pub fn unfold(clip: &ClipTensor, cfg: &TokenizerConfig) -> Result<Vec<f64>> {
    let (gt, gh, gw) = cfg.check_clip(clip)?;
    let dim = cfg.patch_dim();
    let mut out = Vec::with_capacity(gt * gh * gw * dim);
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                for c in 0..cfg.channels {
                    for dt in 0..cfg.tubelet {
                        for dy in 0..cfg.patch_h {
                            let y = ih * cfg.patch_h + dy;
                            let x0 = iw * cfg.patch_w;
                            let start = clip.index(it * cfg.tubelet + dt, c, y, x0);
                            out.extend(
                                clip.pixels[start..start + cfg.patch_w]
                                    .iter()
                                    .map(|&p| p as f64),
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub const TOK_WEIGHT: &str = "mae.tok.w";
pub const TOK_BIAS: &str = "mae.tok.b";

/// Registers the tubelet projection (truncated normal std 0.02, zero bias).
pub fn init_params<R: rand::Rng>(
    store: &mut ParamStore,
    cfg: &TokenizerConfig,
    rng: &mut R,
) -> Result<()> {
    store.init_trunc_normal(TOK_WEIGHT, &[cfg.patch_dim(), cfg.embed_dim], 0.02, rng)?;
    store.init_const(TOK_BIAS, &[cfg.embed_dim], 0.0, false)
}

/// Records `patches @ W + b + PE` on `tape`; `patches` is `N x C*t*h*w`.
pub fn embed(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &TokenizerConfig,
    patches: &[f64],
    coords: &[GridCoord],
) -> Result<Var> {
    let n = coords.len();
    let p = tape.constant(&[n, cfg.patch_dim()], patches.to_vec())?;
    let w = tape.param(store, TOK_WEIGHT)?;
    let b = tape.param(store, TOK_BIAS)?;
    let x = tape.linear(p, w, Some(b))?;
    let pe = tape.constant(
        &[n, cfg.embed_dim],
        positional_encoding(coords, cfg.embed_dim)?,
    )?;
    tape.add(x, pe)
}

/// Tokenizes `clip` into `N x d` embedded tokens with positions added.
pub fn tokenize(clip: &ClipTensor, cfg: &TokenizerConfig, store: &ParamStore) -> Result<TokenGrid> {
    let grid = cfg.check_clip(clip)?;
    let coords = grid_coords(grid.0, grid.1, grid.2);
    let patches = unfold(clip, cfg)?;
    let mut tape = Tape::new();
    let x = embed(&mut tape, store, cfg, &patches, &coords)?;
    let mut tokens = tape.value(x).clone();
    tokens.requires_grad = false;
    tokens.grad = None;
    Ok(TokenGrid {
        tokens,
        coords,
        grid,
    })
}

/// Smallest standard deviation used when normalizing a tubelet.
pub const PATCH_STD_FLOOR: f64 = 1e-6;

/// Standardizes each row to zero mean and unit population variance.
/// Near-constant rows (std below [`PATCH_STD_FLOOR`]) are divided by the floor.
pub fn normalize_rows(rows: &mut [f64], dim: usize) {
    for row in rows.chunks_mut(dim) {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt().max(PATCH_STD_FLOOR);
        row.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
}

/// Per-tubelet normalized reconstruction targets, `N x C*t*h*w`.
pub fn patch_normalize_targets(clip: &ClipTensor, cfg: &TokenizerConfig) -> Result<Vec<f64>> {
    let mut rows = unfold(clip, cfg)?;
    normalize_rows(&mut rows, cfg.patch_dim());
    Ok(rows)
}
