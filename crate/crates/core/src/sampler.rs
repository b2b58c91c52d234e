//! The adaptive token sampler: a policy branch scoring every token through
//! trajectory attention, a value branch estimating the expected reward, and
//! sampling of visible tokens without replacement.

use rand::Rng;

use crate::attention::{SpaceTimeLayout, TaTrace, TrajectoryAttention};
use crate::error::{Result, TatsError};
use crate::optim::ParamStore;
use crate::tensor::{DiffTensor, Tape, Var};

/// Policy over tokens as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl PolicyOutput {
    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
            log_probs: vec![-(n as f64).ln(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .zip(&self.log_probs)
            .map(|(p, l)| p * l)
            .sum::<f64>()
    }
}

/// Partition of token indices into visible and masked sets, both ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub tokens: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskSpec {
    /// Builds the partition from the visible indices.
    pub fn from_visible(tokens: usize, mut visible: Vec<usize>) -> Result<Self> {
        visible.sort_unstable();
        visible.dedup();
        if visible.last().is_some_and(|&i| i >= tokens) {
            return Err(TatsError::invalid(format!(
                "visible index out of range for {tokens} tokens"
            )));
        }
        let mut is_visible = vec![false; tokens];
        visible.iter().for_each(|&i| is_visible[i] = true);
        let masked = (0..tokens).filter(|&i| !is_visible[i]).collect();
        Ok(Self {
            tokens,
            visible,
            masked,
        })
    }

    pub fn num_visible(&self) -> usize {
        self.visible.len()
    }

    /// Mask ratio actually realized, `|I_m| / N`.
    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.tokens as f64
    }

    /// Checks the partition invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.tokens];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= self.tokens || std::mem::replace(&mut seen[i], true) {
                return Err(TatsError::invalid(format!(
                    "index {i} repeated or out of range"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(TatsError::invalid("partition does not cover every token"));
        }
        Ok(())
    }
}

/// `N_v = floor(N (1 - ρ))`, rejecting ratios outside `(0, 1)` and empty visible sets.
pub fn num_visible(tokens: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(TatsError::invalid(format!(
            "mask ratio {ratio} must lie in (0, 1)"
        )));
    }
    // the small offset absorbs representation error such as 16 * (1 - 0.75)
    let nv = (tokens as f64 * (1.0 - ratio) + 1e-6).floor() as usize;
    if nv == 0 {
        return Err(TatsError::invalid(format!(
            "mask ratio {ratio} leaves no visible token out of {tokens}; use a smaller ratio or more tokens"
        )));
    }
    Ok(nv.min(tokens))
}

/// Draws `N_v` distinct indices with probability given by successive
/// renormalized categorical draws from `policy`, using Gumbel perturbation
/// of the log-probabilities followed by top-`N_v` selection.
pub fn sample_visible<R: Rng>(policy: &PolicyOutput, ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    let n = policy.len();
    let nv = num_visible(n, ratio)?;
    let mut keys: Vec<(f64, usize)> = policy
        .log_probs
        .iter()
        .enumerate()
        .map(|(i, &lp)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (lp - (-u.ln()).ln(), i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    MaskSpec::from_visible(n, keys[..nv].iter().map(|k| k.1).collect())
}

/// `Σ_{i ∈ index} log π_i`, differentiable through `log_probs`.
pub fn masked_logprob(tape: &mut Tape, log_probs: Var, index: &[usize]) -> Result<Var> {
    if index.is_empty() {
        return Err(TatsError::invalid("log-probability of an empty index set"));
    }
    let picked = tape.gather_rows(log_probs, index)?;
    tape.sum_all(picked)
}

/// `-Σ π_i log π_i`.
pub fn policy_entropy(tape: &mut Tape, probs: Var, log_probs: Var) -> Result<Var> {
    let pl = tape.mul(probs, log_probs)?;
    let s = tape.sum_all(pl)?;
    tape.scale(s, -1.0)
}

/// Architecture of the sampler module.
#[derive(Clone, Debug, PartialEq)]
pub struct TatsSampler {
    pub ta: TrajectoryAttention,
    pub dim: usize,
    pub value_hidden: (usize, usize),
}

/// Differentiable policy outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PolicyVars {
    pub logits: Var,
    pub probs: Var,
    pub log_probs: Var,
    pub trace: TaTrace,
}

pub const PREFIX: &str = "tats";

impl TatsSampler {
    pub fn new(dim: usize, heads: usize, value_hidden: (usize, usize)) -> Result<Self> {
        Ok(Self {
            ta: TrajectoryAttention::new(&format!("{PREFIX}.ta"), dim, heads)?,
            dim,
            value_hidden,
        })
    }

    /// Trajectory attention with truncated-normal weights, a zero policy head
    /// (uniform initial policy) and a truncated-normal value network.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.ta.init_params(store, rng)?;
        store.init_const("tats.pi.w", &[self.dim, 1], 0.0, true)?;
        store.init_const("tats.pi.b", &[1], 0.0, false)?;
        let (h1, h2) = self.value_hidden;
        for (i, (a, b)) in [(self.dim, h1), (h1, h2), (h2, 1)].into_iter().enumerate() {
            store.init_trunc_normal(&format!("tats.v.w{}", i + 1), &[a, b], 0.02, rng)?;
            store.init_const(&format!("tats.v.b{}", i + 1), &[b], 0.0, false)?;
        }
        Ok(())
    }

    /// `π = softmax(Linear(TA(X)))` over the `N` tokens.
    pub fn policy(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        layout: SpaceTimeLayout,
    ) -> Result<PolicyVars> {
        let trace = self.ta.block(tape, store, x, layout)?;
        let w = tape.param(store, "tats.pi.w")?;
        let b = tape.param(store, "tats.pi.b")?;
        let logits = tape.linear(trace.z, w, Some(b))?;
        let logits = tape.reshape(logits, &[layout.tokens()])?;
        let log_probs = tape.log_softmax(logits, 0)?;
        let probs = tape.exp(log_probs)?;
        Ok(PolicyVars {
            logits,
            probs,
            log_probs,
            trace,
        })
    }

    /// `ψ(X_μ)`: token-mean of `X` through `Linear(h1) -> ReLU(Linear(h2)) -> Linear(1)`.
    pub fn value(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mean = tape.mean(x, 0)?;
        let mut h = tape.reshape(mean, &[1, self.dim])?;
        for i in 1..=3 {
            let w = tape.param(store, &format!("tats.v.w{i}"))?;
            let b = tape.param(store, &format!("tats.v.b{i}"))?;
            h = tape.linear(h, w, Some(b))?;
            if i == 2 {
                h = tape.relu(h)?;
            }
        }
        tape.reshape(h, &[])
    }

    /// Evaluates both branches on plain token values.
    pub fn evaluate(
        &self,
        store: &ParamStore,
        tokens: &DiffTensor,
        layout: SpaceTimeLayout,
    ) -> Result<(PolicyOutput, f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.constant(&tokens.shape, tokens.values.clone())?;
        let pv = self.policy(&mut tape, store, x, layout)?;
        let v = self.value(&mut tape, store, x)?;
        let out = PolicyOutput {
            probs: tape.value(pv.probs).values.clone(),
            log_probs: tape.value(pv.log_probs).values.clone(),
        };
        let spatial = tape.value(pv.trace.spatial_weights).values.clone();
        Ok((out, tape.item(v), spatial))
    }
}
