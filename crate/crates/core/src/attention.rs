//! Trajectory attention over space-time tokens.
//!
//! Tokens are laid out frame-major: token `n = t * S + s` sits at spatial
//! location `s` of (tubelet) frame `t`. Attention runs in two stages:
//!
//! 1. **Trajectory tokens.** Every reference token `st` attends, separately
//!    within each frame `t'`, over the `S` locations of that frame. The
//!    result `ỹ[st, t']` is a soft estimate of where the content of `st`
//!    went at time `t'`.
//! 2. **Temporal pooling.** The trajectory of `st` is re-projected; its
//!    diagonal entry `ỹ[st, t]` provides the new query, which attends over
//!    the `T` points of the trajectory to produce `y[st]`.
//!
//! [`TrajectoryAttention::block`] wraps both stages with an output
//! projection and a residual connection.

use rand::Rng;

use crate::error::{Result, TatsError};
use crate::optim::ParamStore;
use crate::tensor::{Tape, Var};

/// Mapping between token index and (spatial location, frame).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpaceTimeLayout {
    pub spatial: usize,
    pub frames: usize,
}

impl SpaceTimeLayout {
    pub fn new(spatial: usize, frames: usize) -> Result<Self> {
        if spatial == 0 || frames == 0 {
            return Err(TatsError::invalid(format!(
                "empty layout {spatial}x{frames}"
            )));
        }
        Ok(Self { spatial, frames })
    }

    pub fn tokens(&self) -> usize {
        self.spatial * self.frames
    }

    pub fn index(&self, s: usize, t: usize) -> usize {
        t * self.spatial + s
    }

    pub fn locate(&self, n: usize) -> (usize, usize) {
        (n % self.spatial, n / self.spatial)
    }

    /// Row of `ỹ` holding the diagonal trajectory point `ỹ[st, t]` of every token.
    pub fn diagonal_rows(&self) -> Vec<usize> {
        (0..self.tokens())
            .map(|n| n * self.frames + n / self.spatial)
            .collect()
    }
}

/// Hyper-parameters and parameter names of one trajectory-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryAttention {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    /// Scale dot products by `1/sqrt(d_head)`.
    pub scaled: bool,
}

/// Intermediate results of a block forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TaTrace {
    /// Block output `Z`, `N x d`.
    pub z: Var,
    /// Trajectory tokens `ỹ`, `(N*T) x d`, row `n*T + t'`.
    pub trajectories: Var,
    /// Pooled `y` before output projection, `N x d`.
    pub pooled: Var,
    /// Spatial attention, `[H, N, T, S]`.
    pub spatial_weights: Var,
    /// Temporal attention, `[N*H, 1, T]`.
    pub temporal_weights: Var,
}

impl TrajectoryAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TatsError::invalid(format!(
                "dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            dim,
            heads,
            scaled: true,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub const WEIGHTS: [&'static str; 7] = ["wq", "wk", "wv", "wq2", "wk2", "wv2", "wo"];

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for w in Self::WEIGHTS {
            store.init_trunc_normal(&self.name(w), &[self.dim, self.dim], 0.02, rng)?;
        }
        store.init_const(&self.name("bo"), &[self.dim], 0.0, false)
    }

    fn dot_scale(&self) -> f64 {
        if self.scaled {
            1.0 / (self.head_dim() as f64).sqrt()
        } else {
            1.0
        }
    }

    fn check(&self, tape: &Tape, v: Var, rows: usize, what: &str) -> Result<()> {
        let shape = tape.shape(v);
        if shape != [rows, self.dim] {
            return Err(TatsError::shape(
                "trajectory_attention",
                format!(
                    "{what} has shape {shape:?}, layout needs [{rows}, {}]",
                    self.dim
                ),
            ));
        }
        Ok(())
    }

    /// Stage one: returns `(ỹ, spatial weights)`.
    pub fn trajectory_tokens(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        layout: SpaceTimeLayout,
    ) -> Result<(Var, Var)> {
        let n = layout.tokens();
        for (x, what) in [(q, "q"), (k, "k"), (v, "v")] {
            self.check(tape, x, n, what)?;
        }
        let (h, dh, t, s) = (self.heads, self.head_dim(), layout.frames, layout.spatial);
        let heads_first = |tape: &mut Tape, x: Var| -> Result<Var> {
            let r = tape.reshape(x, &[n, h, dh])?;
            tape.permute(r, &[1, 0, 2])
        };
        let qh = heads_first(tape, q)?;
        let kh = heads_first(tape, k)?;
        let scores = tape.bmm(qh, kh, true)?; // [H, N, N]
        let scores = tape.scale(scores, self.dot_scale())?;
        let scores = tape.reshape(scores, &[h, n, t, s])?;
        let weights = tape.softmax(scores, 3)?;

        let w = tape.permute(weights, &[0, 2, 1, 3])?; // [H, T, N, S]
        let w = tape.reshape(w, &[h * t, n, s])?;
        let vh = tape.reshape(v, &[t, s, h, dh])?;
        let vh = tape.permute(vh, &[2, 0, 1, 3])?; // [H, T, S, dh]
        let vh = tape.reshape(vh, &[h * t, s, dh])?;
        let y = tape.bmm(w, vh, false)?; // [H*T, N, dh]
        let y = tape.reshape(y, &[h, t, n, dh])?;
        let y = tape.permute(y, &[2, 1, 0, 3])?; // [N, T, H, dh]
        let y = tape.reshape(y, &[n * t, self.dim])?;
        Ok((y, weights))
    }

    /// Stage two: returns `(y, temporal weights)`.
    pub fn temporal_pool(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        trajectories: Var,
        layout: SpaceTimeLayout,
    ) -> Result<(Var, Var)> {
        let n = layout.tokens();
        let (h, dh, t) = (self.heads, self.head_dim(), layout.frames);
        self.check(tape, trajectories, n * t, "trajectories")?;
        let wq = tape.param(store, &self.name("wq2"))?;
        let wk = tape.param(store, &self.name("wk2"))?;
        let wv = tape.param(store, &self.name("wv2"))?;

        let diag = tape.gather_rows(trajectories, &layout.diagonal_rows())?;
        let q = tape.matmul(diag, wq)?;
        let q = tape.reshape(q, &[n * h, 1, dh])?;
        let per_head = |tape: &mut Tape, w: Var| -> Result<Var> {
            let x = tape.matmul(trajectories, w)?;
            let x = tape.reshape(x, &[n, t, h, dh])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[n * h, t, dh])
        };
        let k = per_head(tape, wk)?;
        let v = per_head(tape, wv)?;
        let scores = tape.bmm(q, k, true)?; // [N*H, 1, T]
        let scores = tape.scale(scores, self.dot_scale())?;
        let weights = tape.softmax(scores, 2)?;
        let y = tape.bmm(weights, v, false)?; // [N*H, 1, dh]
        let y = tape.reshape(y, &[n, self.dim])?;
        Ok((y, weights))
    }

    /// `Z = X + TA(X) W_o + b_o`.
    pub fn block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        layout: SpaceTimeLayout,
    ) -> Result<TaTrace> {
        self.check(tape, x, layout.tokens(), "input")?;
        let wq = tape.param(store, &self.name("wq"))?;
        let wk = tape.param(store, &self.name("wk"))?;
        let wv = tape.param(store, &self.name("wv"))?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let (trajectories, spatial_weights) = self.trajectory_tokens(tape, q, k, v, layout)?;
        let (pooled, temporal_weights) = self.temporal_pool(tape, store, trajectories, layout)?;
        let wo = tape.param(store, &self.name("wo"))?;
        let bo = tape.param(store, &self.name("bo"))?;
        let out = tape.linear(pooled, wo, Some(bo))?;
        let z = tape.add(x, out)?;
        Ok(TaTrace {
            z,
            trajectories,
            pooled,
            spatial_weights,
            temporal_weights,
        })
    }
}

/// Head-averaged spatial attention mass received by every token.
///
/// For token `j` at `(s', t')` this is `(1/S) * sum_{st} mean_h w[h, st, t', s']`:
/// each reference frame contributes the average attention its locations pay
/// to `j`, so values lie in `[0, T]`.
pub fn attention_heatmap(
    spatial_weights: &[f64],
    heads: usize,
    layout: SpaceTimeLayout,
) -> Result<Vec<f64>> {
    let (n, t, s) = (layout.tokens(), layout.frames, layout.spatial);
    if spatial_weights.len() != heads * n * t * s {
        return Err(TatsError::shape(
            "attention_heatmap",
            format!(
                "{} weights for {heads} heads and {n} tokens",
                spatial_weights.len()
            ),
        ));
    }
    let mut sal = vec![0.0; n];
    for h in 0..heads {
        for st in 0..n {
            let base = (h * n + st) * t * s;
            for tp in 0..t {
                for sp in 0..s {
                    sal[layout.index(sp, tp)] += spatial_weights[base + tp * s + sp];
                }
            }
        }
    }
    let norm = 1.0 / (heads * s) as f64;
    sal.iter_mut().for_each(|v| *v *= norm);
    Ok(sal)
}
