//! Training configuration as flat `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! defaults to the desk-scale value; unknown keys and malformed values are
//! reported with their line number.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, TatsError};
use crate::mae::MaeConfig;
use crate::ppo::PpoCoefficients;
use crate::synth::{Background, SpriteSceneParams};
use crate::tokenizer::TokenizerConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    // data
    pub clips: usize,
    pub data_seed: u64,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub moving_sprites: usize,
    pub static_sprites: usize,
    pub sprite_min: usize,
    pub sprite_max: usize,
    pub speed_min: usize,
    pub speed_max: usize,
    pub background: Background,
    // tokens and networks
    pub tubelet: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub l2_loss: bool,
    pub ta_heads: usize,
    /// Value-network hidden widths; 0 means `N` and `N / 2`.
    pub value_hidden1: usize,
    pub value_hidden2: usize,
    // schedule
    pub epochs: usize,
    pub batch: usize,
    pub mask_ratio: f64,
    pub warmup_epochs: usize,
    pub update_interval: usize,
    pub max_steps: u64,
    // optimization
    pub mae_lr: f64,
    pub lr_warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub policy_lr: f64,
    pub policy_weight_decay: f64,
    pub clip_eps: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clips: 512,
            data_seed: 1000,
            frames: 8,
            channels: 3,
            height: 32,
            width: 32,
            moving_sprites: 1,
            static_sprites: 0,
            sprite_min: 6,
            sprite_max: 10,
            speed_min: 1,
            speed_max: 3,
            background: Background::Gradient,
            tubelet: 2,
            patch: 8,
            embed_dim: 64,
            enc_depth: 2,
            enc_heads: 4,
            dec_depth: 1,
            dec_dim: 32,
            dec_heads: 4,
            mlp_ratio: 4,
            l2_loss: false,
            ta_heads: 4,
            value_hidden1: 0,
            value_hidden2: 0,
            epochs: 200,
            batch: 8,
            mask_ratio: 0.9,
            warmup_epochs: 10,
            update_interval: 1,
            max_steps: 0,
            mae_lr: 1e-3,
            lr_warmup_epochs: 20,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            policy_lr: 1e-2,
            policy_weight_decay: 0.0,
            clip_eps: 0.2,
            c1: 1e-4,
            c2: 1e-4,
            c3: 1e-4,
        }
    }
}

fn parse_value<T: FromStr>(raw: &str, line: usize, key: &str) -> Result<T> {
    raw.parse().map_err(|_| TatsError::Config {
        line,
        msg: format!("invalid value `{raw}` for `{key}`"),
    })
}

macro_rules! config_keys {
    ($($field:ident),* $(,)?) => {
        impl TrainConfig {
            /// Every accepted key, in echo order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            fn set(&mut self, key: &str, raw: &str, line: usize) -> Result<()> {
                match key {
                    $(stringify!($field) => self.$field = parse_value(raw, line, key)?,)*
                    _ => return Err(TatsError::Config { line, msg: format!("unknown key `{key}`") }),
                }
                Ok(())
            }

            /// Canonical `key = value` text; parsing it gives back `self`.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($field), self.$field).expect("string write");)*
                s
            }
        }
    };
}

config_keys!(
    seed,
    clips,
    data_seed,
    frames,
    channels,
    height,
    width,
    moving_sprites,
    static_sprites,
    sprite_min,
    sprite_max,
    speed_min,
    speed_max,
    background,
    tubelet,
    patch,
    embed_dim,
    enc_depth,
    enc_heads,
    dec_depth,
    dec_dim,
    dec_heads,
    mlp_ratio,
    l2_loss,
    ta_heads,
    value_hidden1,
    value_hidden2,
    epochs,
    batch,
    mask_ratio,
    warmup_epochs,
    update_interval,
    max_steps,
    mae_lr,
    lr_warmup_epochs,
    weight_decay,
    beta1,
    beta2,
    policy_lr,
    policy_weight_decay,
    clip_eps,
    c1,
    c2,
    c3,
);

impl FromStr for TrainConfig {
    type Err = TatsError;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| TatsError::Config {
                line,
                msg: format!("expected `key = value`, found `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(TatsError::Config {
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TatsError::invalid(msg));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps {} outside (0, 1)", self.clip_eps));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.update_interval == 0 || self.batch == 0 || self.clips == 0 {
            return bad("update_interval, batch and clips must be at least 1".into());
        }
        if self.embed_dim % self.enc_heads != 0
            || self.embed_dim % self.ta_heads != 0
            || self.dec_dim % self.dec_heads != 0
        {
            return bad("attention widths must be divisible by their head counts".into());
        }
        if self.lr_warmup_epochs > self.epochs && self.epochs > 0 {
            return bad(format!(
                "lr_warmup_epochs {} exceeds epochs {}",
                self.lr_warmup_epochs, self.epochs
            ));
        }
        let n = self
            .tokenizer()
            .num_tokens(self.frames, self.height, self.width)?;
        crate::sampler::num_visible(n, self.mask_ratio)?;
        Ok(())
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            channels: self.channels,
            tubelet: self.tubelet,
            patch_h: self.patch,
            patch_w: self.patch,
            embed_dim: self.embed_dim,
        }
    }

    pub fn mae(&self) -> MaeConfig {
        MaeConfig {
            enc_depth: self.enc_depth,
            enc_dim: self.embed_dim,
            enc_heads: self.enc_heads,
            dec_depth: self.dec_depth,
            dec_dim: self.dec_dim,
            dec_heads: self.dec_heads,
            patch_dim: self.tokenizer().patch_dim(),
            mlp_ratio: self.mlp_ratio,
            l2_loss: self.l2_loss,
        }
    }

    pub fn ppo(&self) -> PpoCoefficients {
        PpoCoefficients {
            clip_eps: self.clip_eps,
            c1: self.c1,
            c2: self.c2,
            c3: self.c3,
        }
    }

    pub fn scene(&self) -> SpriteSceneParams {
        SpriteSceneParams {
            frames: self.frames,
            height: self.height,
            width: self.width,
            moving_sprites: self.moving_sprites,
            static_sprites: self.static_sprites,
            size_range: (self.sprite_min, self.sprite_max),
            speed_range: (self.speed_min, self.speed_max),
            background: self.background,
            seed: self.data_seed,
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokenizer()
            .num_tokens(self.frames, self.height, self.width)
            .unwrap_or(0)
    }

    pub fn value_hidden(&self) -> (usize, usize) {
        let n = self.tokens();
        let h1 = if self.value_hidden1 == 0 {
            n
        } else {
            self.value_hidden1
        };
        let h2 = if self.value_hidden2 == 0 {
            (h1 / 2).max(1)
        } else {
            self.value_hidden2
        };
        (h1, h2)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.clips.div_ceil(self.batch) as u64
    }
}
