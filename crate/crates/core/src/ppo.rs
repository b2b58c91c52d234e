//! Episodes, the memory buffer and the clipped PPO objective for the sampler.

use crate::attention::SpaceTimeLayout;
use crate::error::{Result, TatsError};
use crate::optim::ParamStore;
use crate::sampler::{masked_logprob, policy_entropy, TatsSampler};
use crate::tensor::{DiffTensor, Tape, Var};

/// Objective coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpoCoefficients {
    /// Clip threshold ε.
    pub clip_eps: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for PpoCoefficients {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            c1: 1e-4,
            c2: 1e-4,
            c3: 1e-4,
        }
    }
}

/// One recorded sampler interaction. Every field is plain data, so nothing
/// here can link back into a computation graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Embedded tokens `X` at recording time, `N x d`.
    pub tokens: DiffTensor,
    /// `Σ_{i ∈ I_m} log π_θold(i | X)`.
    pub old_logprob: f64,
    /// Reconstruction loss `L_R`, detached.
    pub reward: f64,
    /// `ψ_θold(X_μ)`.
    pub old_value: f64,
    /// Masked indices `I_m`.
    pub masked: Vec<usize>,
    /// Per-token motion labels of the source clip, when known.
    pub motion: Option<Vec<bool>>,
}

impl Episode {
    pub fn advantage(&self) -> f64 {
        compute_advantage(self)
    }
}

/// `A = L_R - ψ_θold(X_μ)`.
pub fn compute_advantage(ep: &Episode) -> f64 {
    ep.reward - ep.old_value
}

/// Ordered list of episodes awaiting a policy update.
#[derive(Clone, Debug, Default)]
pub struct MemoryBuffer {
    episodes: Vec<Episode>,
    /// Episodes per recorded step (the batch size).
    pub batch: usize,
}

impl MemoryBuffer {
    pub fn new(batch: usize) -> Self {
        Self {
            episodes: Vec::new(),
            batch,
        }
    }

    pub fn push(&mut self, ep: Episode) {
        self.episodes.push(ep);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.episodes.clear();
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    /// Episodes grouped by the step that recorded them.
    pub fn batches(&self) -> std::slice::Chunks<'_, Episode> {
        self.episodes.chunks(self.batch.max(1))
    }
}

/// `min(r A, clip(r, 1-ε, 1+ε) A)`. At a tie the gradient follows the
/// unclipped branch.
pub fn clipped_surrogate(tape: &mut Tape, ratio: Var, advantage: f64, eps: f64) -> Result<Var> {
    let unclipped = tape.scale(ratio, advantage)?;
    let clipped = tape.clip(ratio, 1.0 - eps, 1.0 + eps)?;
    let clipped = tape.scale(clipped, advantage)?;
    tape.min(unclipped, clipped)
}

/// Plain-value form of [`clipped_surrogate`].
pub fn surrogate_value(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// `c1 J_CLIP - c2 (ψ - L_R)^2 + c3 H` for one episode.
pub fn objective_value(j_clip: f64, value_error: f64, entropy: f64, k: &PpoCoefficients) -> f64 {
    k.c1 * j_clip - k.c2 * value_error * value_error + k.c3 * entropy
}

/// Batch averages reported alongside the objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjectiveTerms {
    pub j: f64,
    pub j_clip: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub ratio_mean: f64,
    pub ratio_max: f64,
    pub mean_advantage: f64,
    /// Per-episode `J_CLIP` values.
    pub policy_terms: Vec<f64>,
    pub ratios: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Records `L_S = -J` for a batch of episodes under the current sampler
/// parameters, evaluating the new policy on each stored `I_m`.
pub fn ppo_objective(
    tape: &mut Tape,
    store: &ParamStore,
    sampler: &TatsSampler,
    layout: SpaceTimeLayout,
    episodes: &[Episode],
    k: &PpoCoefficients,
) -> Result<(Var, ObjectiveTerms)> {
    if episodes.is_empty() {
        return Err(TatsError::invalid("PPO objective over an empty batch"));
    }
    let mut total: Option<Var> = None;
    let mut terms = ObjectiveTerms {
        ratio_max: f64::NEG_INFINITY,
        ..Default::default()
    };
    for (i, ep) in episodes.iter().enumerate() {
        let x = tape.constant(&ep.tokens.shape, ep.tokens.values.clone())?;
        let pv = sampler.policy(tape, store, x, layout)?;
        let lp = masked_logprob(tape, pv.log_probs, &ep.masked)?;
        let old = tape.scalar(ep.old_logprob);
        let delta = tape.sub(lp, old)?;
        let ratio = tape.exp(delta)?;
        let r = tape.item(ratio);
        if !r.is_finite() || r <= 0.0 {
            return Err(TatsError::NonFinite(format!(
                "importance ratio {r} for episode {i} (log-prob change {})",
                tape.item(delta)
            )));
        }
        let adv = ep.advantage();
        let jclip = clipped_surrogate(tape, ratio, adv, k.clip_eps)?;

        let v = sampler.value(tape, store, x)?;
        let reward = tape.scalar(ep.reward);
        let verr = tape.sub(v, reward)?;
        let vloss = tape.square(verr)?;
        let h = policy_entropy(tape, pv.probs, pv.log_probs)?;

        let a = tape.scale(jclip, k.c1)?;
        let b = tape.scale(vloss, -k.c2)?;
        let c = tape.scale(h, k.c3)?;
        let ab = tape.add(a, b)?;
        let term = tape.add(ab, c)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });

        terms.j_clip += tape.item(jclip);
        terms.value_loss += tape.item(vloss);
        terms.entropy += tape.item(h);
        terms.ratio_mean += r;
        terms.ratio_max = terms.ratio_max.max(r);
        terms.mean_advantage += adv;
        terms.policy_terms.push(tape.item(jclip));
        terms.ratios.push(r);
        terms.advantages.push(adv);
    }
    let b = episodes.len() as f64;
    let j = tape.scale(total.expect("nonempty batch"), 1.0 / b)?;
    terms.j = tape.item(j);
    terms.j_clip /= b;
    terms.value_loss /= b;
    terms.entropy /= b;
    terms.ratio_mean /= b;
    terms.mean_advantage /= b;
    let loss = tape.scale(j, -1.0)?;
    Ok((loss, terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surrogate_cases() {
        assert_eq!(surrogate_value(1.0, 0.7, 0.2), 0.7);
        assert_eq!(surrogate_value(2.0, 1.0, 0.2), 1.2);
        assert_eq!(surrogate_value(0.5, -1.0, 0.2), -0.8);
        assert_eq!(surrogate_value(1.5, 0.2, 0.2), 0.24);
    }

    #[test]
    fn advantage_is_reward_minus_value() {
        let ep = Episode {
            tokens: DiffTensor::zeros(&[1, 1]),
            old_logprob: 0.0,
            reward: 0.8,
            old_value: 0.5,
            masked: vec![0],
            motion: None,
        };
        assert!((compute_advantage(&ep) - 0.3).abs() < 1e-15);
        let same = Episode {
            old_value: 0.8,
            ..ep
        };
        assert_eq!(same.advantage(), 0.0);
    }

    #[test]
    fn buffer_batches_and_reset() {
        let ep = Episode {
            tokens: DiffTensor::zeros(&[1, 1]),
            old_logprob: 0.0,
            reward: 0.0,
            old_value: 0.0,
            masked: vec![0],
            motion: None,
        };
        let mut b = MemoryBuffer::new(2);
        (0..5).for_each(|_| b.push(ep.clone()));
        assert_eq!(
            b.batches().map(<[Episode]>::len).collect::<Vec<_>>(),
            vec![2, 2, 1]
        );
        b.reset();
        assert!(b.is_empty());
    }
}
