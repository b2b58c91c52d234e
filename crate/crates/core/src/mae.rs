//! Masked autoencoder: a pre-norm transformer encoder over the visible
//! tokens, a decoder over the full token set with a shared learnable mask
//! token, and a linear projector to per-tubelet pixel targets.

use rand::Rng;

use crate::error::{Result, TatsError};
use crate::optim::ParamStore;
use crate::posenc::{positional_encoding, GridCoord};
use crate::sampler::{num_visible, MaskSpec};
use crate::tensor::{Tape, Var};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Encoder and decoder sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeConfig {
    pub enc_depth: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    /// Projector output width `C*t*h*w`.
    pub patch_dim: usize,
    pub mlp_ratio: usize,
    /// Use the per-token L2 norm of the error instead of its mean square.
    pub l2_loss: bool,
}

impl MaeConfig {
    /// ViT-Base encoder with the 4-block, 384-wide decoder.
    pub fn full_size() -> Self {
        Self {
            enc_depth: 12,
            enc_dim: 768,
            enc_heads: 12,
            dec_depth: 4,
            dec_dim: 384,
            dec_heads: 6,
            patch_dim: 1536,
            mlp_ratio: 4,
            l2_loss: false,
        }
    }

    pub fn desk(patch_dim: usize) -> Self {
        Self {
            enc_depth: 2,
            enc_dim: 64,
            enc_heads: 4,
            dec_depth: 1,
            dec_dim: 32,
            dec_heads: 4,
            patch_dim,
            mlp_ratio: 4,
            l2_loss: false,
        }
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))` then `h + MLP(LN(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl TransformerBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TatsError::invalid(format!(
                "dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            dim,
            heads,
            hidden,
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let d = self.dim;
        for ln in ["ln1", "ln2"] {
            store.init_const(&self.name(&format!("{ln}.g")), &[d], 1.0, false)?;
            store.init_const(&self.name(&format!("{ln}.b")), &[d], 0.0, false)?;
        }
        for w in ["wq", "wk", "wv", "wo"] {
            store.init_trunc_normal(&self.name(w), &[d, d], INIT_STD, rng)?;
            store.init_const(&self.name(&format!("b{}", &w[1..])), &[d], 0.0, false)?;
        }
        store.init_trunc_normal(&self.name("fc1.w"), &[d, self.hidden], INIT_STD, rng)?;
        store.init_const(&self.name("fc1.b"), &[self.hidden], 0.0, false)?;
        store.init_trunc_normal(&self.name("fc2.w"), &[self.hidden, d], INIT_STD, rng)?;
        store.init_const(&self.name("fc2.b"), &[d], 0.0, false)
    }

    fn dense(&self, tape: &mut Tape, store: &ParamStore, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = tape.param(store, &self.name(w))?;
        let b = tape.param(store, &self.name(b))?;
        tape.linear(x, w, Some(b))
    }

    fn norm(&self, tape: &mut Tape, store: &ParamStore, x: Var, ln: &str) -> Result<Var> {
        let g = tape.param(store, &self.name(&format!("{ln}.g")))?;
        let b = tape.param(store, &self.name(&format!("{ln}.b")))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn attention(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let (h, dh) = (self.heads, self.dim / self.heads);
        let mut split = |w: &str, b: &str| -> Result<Var> {
            let y = self.dense(tape, store, x, w, b)?;
            let y = tape.reshape(y, &[n, h, dh])?;
            tape.permute(y, &[1, 0, 2])
        };
        let q = split("wq", "bq")?;
        let k = split("wk", "bk")?;
        let v = split("wv", "bv")?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let w = tape.softmax(scores, 2)?;
        let y = tape.bmm(w, v, false)?;
        let y = tape.permute(y, &[1, 0, 2])?;
        let y = tape.reshape(y, &[n, self.dim])?;
        self.dense(tape, store, y, "wo", "bo")
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.norm(tape, store, x, "ln1")?;
        let a = self.attention(tape, store, a)?;
        let h = tape.add(x, a)?;
        let m = self.norm(tape, store, h, "ln2")?;
        let m = self.dense(tape, store, m, "fc1.w", "fc1.b")?;
        let m = tape.gelu(m)?;
        let m = self.dense(tape, store, m, "fc2.w", "fc2.b")?;
        tape.add(h, m)
    }
}

/// Parameter names outside the blocks.
pub const MASK_TOKEN: &str = "mae.mask_token";
pub const PROJ_NORM: &str = "mae.proj.norm";
pub const PROJ: &str = "mae.proj";
pub const DEC_NORM: &str = "mae.dec.norm";
pub const HEAD: &str = "mae.head";

/// Result of one masked-autoencoder forward pass.
#[derive(Clone, Copy, Debug)]
pub struct MaeOutput {
    pub encoded: Var,
    pub prediction: Var,
    pub loss: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedAutoencoder {
    pub cfg: MaeConfig,
    pub encoder: Vec<TransformerBlock>,
    pub decoder: Vec<TransformerBlock>,
}

impl MaskedAutoencoder {
    pub fn new(cfg: MaeConfig) -> Result<Self> {
        let block = |side: &str, i: usize, dim: usize, heads: usize| {
            TransformerBlock::new(&format!("mae.{side}.{i}"), dim, heads, dim * cfg.mlp_ratio)
        };
        let encoder = (0..cfg.enc_depth)
            .map(|i| block("enc", i, cfg.enc_dim, cfg.enc_heads))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.dec_depth)
            .map(|i| block("dec", i, cfg.dec_dim, cfg.dec_heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            encoder,
            decoder,
        })
    }

    /// Initializes the encoder, decoder and projector; the tokenizer
    /// parameters are registered separately.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = &self.cfg;
        for b in self.encoder.iter().chain(&self.decoder) {
            b.init_params(store, rng)?;
        }
        store.init_const(&format!("{PROJ_NORM}.g"), &[c.enc_dim], 1.0, false)?;
        store.init_const(&format!("{PROJ_NORM}.b"), &[c.enc_dim], 0.0, false)?;
        store.init_trunc_normal(&format!("{PROJ}.w"), &[c.enc_dim, c.dec_dim], INIT_STD, rng)?;
        store.init_const(&format!("{PROJ}.b"), &[c.dec_dim], 0.0, false)?;
        store.init_trunc_normal(MASK_TOKEN, &[1, c.dec_dim], INIT_STD, rng)?;
        store.param_mut(MASK_TOKEN).expect("just inserted").decay = false;
        store.init_const(&format!("{DEC_NORM}.g"), &[c.dec_dim], 1.0, false)?;
        store.init_const(&format!("{DEC_NORM}.b"), &[c.dec_dim], 0.0, false)?;
        store.init_trunc_normal(
            &format!("{HEAD}.w"),
            &[c.dec_dim, c.patch_dim],
            INIT_STD,
            rng,
        )?;
        store.init_const(&format!("{HEAD}.b"), &[c.patch_dim], 0.0, false)
    }

    /// Runs the encoder blocks on the visible tokens `X_v` (`N_v x d`).
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, visible: Var) -> Result<Var> {
        let shape = tape.shape(visible).to_vec();
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.cfg.enc_dim {
            return Err(TatsError::shape(
                "encode",
                format!(
                    "visible tokens {shape:?}, expected [N_v > 0, {}]",
                    self.cfg.enc_dim
                ),
            ));
        }
        let mut x = visible;
        for b in &self.encoder {
            x = b.forward(tape, store, x)?;
        }
        Ok(x)
    }

    /// Decodes `F_v` back to `N x patch_dim` predictions in token order.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoded: Var,
        mask: &MaskSpec,
        coords: &[GridCoord],
    ) -> Result<Var> {
        let n = mask.tokens;
        if coords.len() != n || tape.shape(encoded)[0] != mask.visible.len() {
            return Err(TatsError::shape(
                "decode",
                format!(
                    "{} encoded rows and {} positions for a mask over {n} tokens with {} visible",
                    tape.shape(encoded)[0],
                    coords.len(),
                    mask.visible.len()
                ),
            ));
        }
        let dd = self.cfg.dec_dim;
        let g = tape.param(store, &format!("{PROJ_NORM}.g"))?;
        let b = tape.param(store, &format!("{PROJ_NORM}.b"))?;
        let f = tape.layer_norm(encoded, g, b, LN_EPS)?;
        let w = tape.param(store, &format!("{PROJ}.w"))?;
        let b = tape.param(store, &format!("{PROJ}.b"))?;
        let f = tape.linear(f, w, Some(b))?;

        let mut x = if mask.masked.is_empty() {
            f
        } else {
            let m = tape.param(store, MASK_TOKEN)?;
            let m = tape.gather_rows(m, &vec![0; mask.masked.len()])?;
            tape.concat_rows(&[f, m])?
        };
        x = tape.gather_rows(x, &restore_order(mask))?;
        let pe = tape.constant(&[n, dd], positional_encoding(coords, dd)?)?;
        x = tape.add(x, pe)?;
        for blk in &self.decoder {
            x = blk.forward(tape, store, x)?;
        }
        debug_assert_eq!(tape.shape(x), [n, dd]);
        let g = tape.param(store, &format!("{DEC_NORM}.g"))?;
        let b = tape.param(store, &format!("{DEC_NORM}.b"))?;
        x = tape.layer_norm(x, g, b, LN_EPS)?;
        let w = tape.param(store, &format!("{HEAD}.w"))?;
        let b = tape.param(store, &format!("{HEAD}.b"))?;
        tape.linear(x, w, Some(b))
    }

    /// Full pass from embedded tokens `X` (`N x d`) to the reconstruction loss.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
        mask: &MaskSpec,
        coords: &[GridCoord],
        targets: Var,
    ) -> Result<MaeOutput> {
        if tape.shape(tokens)[0] != mask.tokens {
            return Err(TatsError::shape(
                "mae_forward",
                format!(
                    "{} tokens for a mask over {}",
                    tape.shape(tokens)[0],
                    mask.tokens
                ),
            ));
        }
        let visible = tape.gather_rows(tokens, &mask.visible)?;
        let encoded = self.encode(tape, store, visible)?;
        let prediction = self.decode(tape, store, encoded, mask, coords)?;
        let loss = reconstruction_loss(tape, prediction, targets, &mask.masked, self.cfg.l2_loss)?;
        Ok(MaeOutput {
            encoded,
            prediction,
            loss,
        })
    }
}

/// For each token position, the row of `[visible ; masked]` holding it.
pub fn restore_order(mask: &MaskSpec) -> Vec<usize> {
    let mut inv = vec![0; mask.tokens];
    for (row, &tok) in mask.visible.iter().chain(&mask.masked).enumerate() {
        inv[tok] = row;
    }
    inv
}

/// Mean over masked tokens of the per-token mean squared error, or of the
/// per-token L2 norm of the error when `l2` is set.
pub fn reconstruction_loss(
    tape: &mut Tape,
    prediction: Var,
    target: Var,
    masked: &[usize],
    l2: bool,
) -> Result<Var> {
    if masked.is_empty() {
        return Err(TatsError::invalid(
            "reconstruction loss needs at least one masked token",
        ));
    }
    if tape.shape(prediction) != tape.shape(target) {
        return Err(TatsError::shape(
            "reconstruction_loss",
            format!(
                "prediction {:?} vs target {:?}",
                tape.shape(prediction),
                tape.shape(target)
            ),
        ));
    }
    let p = tape.gather_rows(prediction, masked)?;
    let t = tape.gather_rows(target, masked)?;
    let e = tape.sub(p, t)?;
    let e = tape.square(e)?;
    if l2 {
        let per_token = tape.sum(e, 1)?;
        let per_token = tape.sqrt(per_token)?;
        tape.mean_all(per_token)
    } else {
        tape.mean_all(e)
    }
}

/// Uniform space-time masking: `N_v` visible indices without replacement.
pub fn random_spacetime_mask<R: Rng>(tokens: usize, ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    let nv = num_visible(tokens, ratio)?;
    MaskSpec::from_visible(tokens, rand::seq::index::sample(rng, tokens, nv).into_vec())
}
