//! Synthetic sprite videos with per-token motion ground truth.
//!
//! A scene is a static background with solid rectangular sprites. Moving
//! sprites advance by an integer velocity each frame and reflect off the
//! frame border. A token is a motion token when some sprite with nonzero
//! velocity covers at least one of its pixels in one of its frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TatsError};
use crate::tokenizer::{ClipTensor, TokenizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    /// Per-pixel uniform noise, identical in every frame.
    Noise,
    /// Smooth diagonal ramp, identical in every frame.
    Gradient,
}

impl std::str::FromStr for Background {
    type Err = TatsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "gradient" => Ok(Self::Gradient),
            _ => Err(TatsError::invalid(format!(
                "unknown background `{s}` (expected noise or gradient)"
            ))),
        }
    }
}

impl std::fmt::Display for Background {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Noise => "noise",
            Self::Gradient => "gradient",
        })
    }
}

/// Axis-aligned motion directions used as probe labels.
pub const DIRECTIONS: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteSceneParams {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub moving_sprites: usize,
    pub static_sprites: usize,
    /// Inclusive side-length range in pixels.
    pub size_range: (usize, usize),
    /// Inclusive speed range in pixels per frame.
    pub speed_range: (usize, usize),
    pub background: Background,
    pub seed: u64,
}

impl SpriteSceneParams {
    pub fn desk(seed: u64) -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            moving_sprites: 1,
            static_sprites: 0,
            size_range: (6, 10),
            speed_range: (1, 3),
            background: Background::Gradient,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    /// Top-left corner in frame 0.
    pub y: i64,
    pub x: i64,
    pub h: usize,
    pub w: usize,
    /// Velocity in pixels per frame (dy, dx).
    pub vy: i64,
    pub vx: i64,
    pub color: Vec<f32>,
}

impl Sprite {
    pub fn is_moving(&self) -> bool {
        self.vy != 0 || self.vx != 0
    }

    /// Top-left corner in every frame, reflecting off the borders.
    pub fn path(&self, frames: usize, height: usize, width: usize) -> Vec<(i64, i64)> {
        let (my, mx) = ((height - self.h) as i64, (width - self.w) as i64);
        let (mut y, mut x, mut vy, mut vx) = (self.y, self.x, self.vy, self.vx);
        let mut out = Vec::with_capacity(frames);
        for _ in 0..frames {
            out.push((y, x));
            (y, vy) = reflect(y + vy, vy, my);
            (x, vx) = reflect(x + vx, vx, mx);
        }
        out
    }
}

fn reflect(mut p: i64, mut v: i64, max: i64) -> (i64, i64) {
    if max == 0 {
        return (0, v);
    }
    loop {
        if p < 0 {
            p = -p;
            v = -v;
        } else if p > max {
            p = 2 * max - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

/// A rendered scene together with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub clip: ClipTensor,
    pub sprites: Vec<Sprite>,
    /// Direction class of the moving sprites, an index into [`DIRECTIONS`].
    pub direction: usize,
}

/// Per-token flag: the tubelet overlaps a moving sprite.
pub type MotionMask = Vec<bool>;

fn background_value(
    bg: Background,
    c: usize,
    y: usize,
    x: usize,
    h: usize,
    w: usize,
    noise: &[f32],
    channels: usize,
) -> f32 {
    match bg {
        Background::Noise => noise[(y * w + x) * channels + c],
        Background::Gradient => {
            let u = (x as f32 + 0.5) / w as f32;
            let v = (y as f32 + 0.5) / h as f32;
            0.1 + 0.15 * (u + v) + 0.05 * c as f32 * (u - v)
        }
    }
}

/// Rasterizes `sprites` over a static background.
pub fn render(
    params: &SpriteSceneParams,
    channels: usize,
    sprites: &[Sprite],
    noise_seed: u64,
) -> Result<ClipTensor> {
    let (t, h, w) = (params.frames, params.height, params.width);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise: Vec<f32> = match params.background {
        Background::Noise => (0..h * w * channels)
            .map(|_| noise_rng.gen_range(0.0..0.5))
            .collect(),
        Background::Gradient => Vec::new(),
    };
    let mut clip = ClipTensor::zeros(t, channels, h, w);
    for f in 0..t {
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    let i = clip.index(f, c, y, x);
                    clip.pixels[i] =
                        background_value(params.background, c, y, x, h, w, &noise, channels);
                }
            }
        }
    }
    for s in sprites {
        if s.color.len() != channels {
            return Err(TatsError::invalid(format!(
                "sprite has {} colour channels, clip has {channels}",
                s.color.len()
            )));
        }
        for (f, (y0, x0)) in s.path(t, h, w).into_iter().enumerate() {
            for c in 0..channels {
                for y in y0 as usize..y0 as usize + s.h {
                    for x in x0 as usize..x0 as usize + s.w {
                        let i = clip.index(f, c, y, x);
                        clip.pixels[i] = s.color[c];
                    }
                }
            }
        }
    }
    Ok(clip)
}

/// Draws a scene and renders it. Identical parameters give a bit-identical scene.
pub fn generate_scene(params: &SpriteSceneParams, channels: usize) -> Result<Scene> {
    let (lo, hi) = params.size_range;
    if lo == 0 || lo > hi || hi > params.height || hi > params.width {
        return Err(TatsError::invalid(format!(
            "sprite sizes {lo}..={hi} do not fit a {}x{} frame",
            params.height, params.width
        )));
    }
    if params.speed_range.0 > params.speed_range.1
        || (params.moving_sprites > 0 && params.speed_range.1 == 0)
    {
        return Err(TatsError::invalid(format!(
            "invalid speed range {:?}",
            params.speed_range
        )));
    }
    if params.frames == 0 {
        return Err(TatsError::invalid("scene needs at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let direction = rng.gen_range(0..DIRECTIONS.len());
    let (dy, dx) = DIRECTIONS[direction];
    let mut sprites = Vec::new();
    for i in 0..params.moving_sprites + params.static_sprites {
        let (h, w) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
        let y = rng.gen_range(0..=params.height - h) as i64;
        let x = rng.gen_range(0..=params.width - w) as i64;
        let moving = i < params.moving_sprites;
        let speed = if moving {
            rng.gen_range(params.speed_range.0.max(1)..=params.speed_range.1) as i64
        } else {
            0
        };
        let color = (0..channels).map(|_| rng.gen_range(0.6f32..1.0)).collect();
        sprites.push(Sprite {
            y,
            x,
            h,
            w,
            vy: dy * speed,
            vx: dx * speed,
            color,
        });
    }
    let clip = render(params, channels, &sprites, rng.gen())?;
    Ok(Scene {
        clip,
        sprites,
        direction,
    })
}

/// Motion flags per token, from rectangle intersection of every moving
/// sprite with every tubelet.
pub fn motion_mask(scene: &Scene, cfg: &TokenizerConfig) -> Result<MotionMask> {
    let clip = &scene.clip;
    let (gt, gh, gw) = cfg.grid(clip.frames, clip.height, clip.width)?;
    let mut mask = vec![false; gt * gh * gw];
    for s in scene.sprites.iter().filter(|s| s.is_moving()) {
        for (f, (y0, x0)) in s
            .path(clip.frames, clip.height, clip.width)
            .into_iter()
            .enumerate()
        {
            let tt = f / cfg.tubelet;
            let (y0, x0) = (y0 as usize, x0 as usize);
            let (y1, x1) = (y0 + s.h - 1, x0 + s.w - 1);
            for gy in y0 / cfg.patch_h..=y1 / cfg.patch_h {
                for gx in x0 / cfg.patch_w..=x1 / cfg.patch_w {
                    mask[(tt * gh + gy) * gw + gx] = true;
                }
            }
        }
    }
    Ok(mask)
}

/// One scene per seed `base_seed + i`, with motion masks.
pub fn generate_dataset(
    template: &SpriteSceneParams,
    cfg: &TokenizerConfig,
    count: usize,
    base_seed: u64,
) -> Result<Vec<(Scene, MotionMask)>> {
    (0..count as u64)
        .map(|i| {
            let p = SpriteSceneParams {
                seed: base_seed.wrapping_add(i),
                ..template.clone()
            };
            let scene = generate_scene(&p, cfg.channels)?;
            let mask = motion_mask(&scene, cfg)?;
            Ok((scene, mask))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_stays_in_bounds() {
        let s = Sprite {
            y: 0,
            x: 20,
            h: 8,
            w: 8,
            vy: 0,
            vx: 5,
            color: vec![1.0],
        };
        let path = s.path(10, 32, 32);
        assert!(path.iter().all(|&(_, x)| (0..=24).contains(&x)));
        assert_eq!(path[1], (0, 23));
        assert_eq!(path[2], (0, 18));
    }

    #[test]
    fn background_parsing() {
        assert_eq!("noise".parse::<Background>().unwrap(), Background::Noise);
        assert!("stripes".parse::<Background>().is_err());
        assert_eq!(Background::Gradient.to_string(), "gradient");
    }
}
