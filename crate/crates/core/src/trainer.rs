//! Joint training: random-mask warmup, then alternating MAE updates with
//! episode recording (phase 1) and PPO updates of the sampler (phase 2).

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_heatmap, SpaceTimeLayout};
use crate::config::TrainConfig;
use crate::error::{Result, TatsError};
use crate::eval::{linear_probe_eval, motion_hit_rate, ProbeConfig};
use crate::io::checkpoint::{Checkpoint, RngState};
use crate::mae::{random_spacetime_mask, MaskedAutoencoder};
use crate::optim::{adamw_step, AdamW, ParamStore};
use crate::posenc::{grid_coords, GridCoord};
use crate::ppo::{ppo_objective, Episode, MemoryBuffer};
use crate::sampler::{masked_logprob, sample_visible, MaskSpec, PolicyOutput, TatsSampler};
use crate::synth::{generate_dataset, MotionMask, DIRECTIONS};
use crate::tensor::{DiffTensor, Tape, Var};
use crate::tokenizer::{self, embed, patch_normalize_targets, unfold, ClipTensor, TokenizerConfig};

/// Networks and parameters. `phi` holds the tokenizer and autoencoder,
/// `theta` the sampler.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub tok: TokenizerConfig,
    pub layout: SpaceTimeLayout,
    pub coords: Vec<GridCoord>,
    pub mae: MaskedAutoencoder,
    pub sampler: TatsSampler,
    pub phi: ParamStore,
    pub theta: ParamStore,
}

/// Policy-side quantities for one clip at the current sampler parameters.
#[derive(Clone, Debug)]
pub struct SamplerView {
    pub tokens: DiffTensor,
    pub policy: PolicyOutput,
    pub value: f64,
    pub spatial_weights: Vec<f64>,
}

impl Model {
    /// Architecture only, with empty parameter stores.
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let tok = cfg.tokenizer();
        let (gt, gh, gw) = tok.grid(cfg.frames, cfg.height, cfg.width)?;
        let layout = SpaceTimeLayout::new(gh * gw, gt)?;
        Ok(Self {
            cfg: cfg.clone(),
            tok,
            layout,
            coords: grid_coords(gt, gh, gw),
            mae: MaskedAutoencoder::new(cfg.mae())?,
            sampler: TatsSampler::new(cfg.embed_dim, cfg.ta_heads, cfg.value_hidden())?,
            phi: ParamStore::new(),
            theta: ParamStore::new(),
        })
    }

    /// Freshly initialized parameters drawn from `rng`.
    pub fn init(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut m = Self::build(cfg)?;
        tokenizer::init_params(&mut m.phi, &m.tok, rng)?;
        m.mae.init_params(&mut m.phi, rng)?;
        m.sampler.init_params(&mut m.theta, rng)?;
        Ok(m)
    }

    /// Embedded tokens recorded on `tape` (differentiable w.r.t. the tokenizer).
    pub fn embed(&self, tape: &mut Tape, clip: &ClipTensor) -> Result<Var> {
        embed(
            tape,
            &self.phi,
            &self.tok,
            &unfold(clip, &self.tok)?,
            &self.coords,
        )
    }

    /// Detached embedded tokens.
    pub fn tokens(&self, clip: &ClipTensor) -> Result<DiffTensor> {
        let mut tape = Tape::new();
        let x = self.embed(&mut tape, clip)?;
        Ok(detach(tape.value(x)))
    }

    /// MAE forward on `clip` under `mask`, returning the loss and the detached tokens.
    pub fn reconstruction(
        &self,
        tape: &mut Tape,
        clip: &ClipTensor,
        x: Var,
        mask: &MaskSpec,
    ) -> Result<Var> {
        let targets = patch_normalize_targets(clip, &self.tok)?;
        let t = tape.constant(&[mask.tokens, self.tok.patch_dim()], targets)?;
        Ok(self
            .mae
            .forward(tape, &self.phi, x, mask, &self.coords, t)?
            .loss)
    }

    pub fn view(&self, clip: &ClipTensor) -> Result<SamplerView> {
        let tokens = self.tokens(clip)?;
        let (policy, value, spatial_weights) =
            self.sampler.evaluate(&self.theta, &tokens, self.layout)?;
        Ok(SamplerView {
            tokens,
            policy,
            value,
            spatial_weights,
        })
    }

    /// Head-averaged attention saliency per token.
    pub fn heatmap(&self, view: &SamplerView) -> Result<Vec<f64>> {
        attention_heatmap(&view.spatial_weights, self.sampler.ta.heads, self.layout)
    }
}

fn detach(t: &DiffTensor) -> DiffTensor {
    DiffTensor {
        requires_grad: false,
        grad: None,
        ..t.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Phase1,
    Phase2,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
        })
    }
}

pub const METRICS_HEADER: &str =
    "step,epoch,phase,L_R,L_S,J_clip,value_loss,entropy,ratio_mean,ratio_max,hit_rate";

/// One metrics line; fields that do not apply to the phase are empty.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub l_r: Option<f64>,
    pub l_s: Option<f64>,
    pub j_clip: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub ratio_mean: Option<f64>,
    pub ratio_max: Option<f64>,
    pub hit_rate: Option<f64>,
}

impl MetricsRow {
    fn new(step: u64, epoch: usize, phase: Phase) -> Self {
        Self {
            step,
            epoch,
            phase,
            l_r: None,
            l_s: None,
            j_clip: None,
            value_loss: None,
            entropy: None,
            ratio_mean: None,
            ratio_max: None,
            hit_rate: None,
        }
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.phase,
            f(self.l_r),
            f(self.l_s),
            f(self.j_clip),
            f(self.value_loss),
            f(self.entropy),
            f(self.ratio_mean),
            f(self.ratio_max),
            f(self.hit_rate)
        )
    }
}

/// Training state: model, data, episode buffer and the mask rng.
pub struct Trainer {
    pub model: Model,
    pub data: Vec<(ClipTensor, MotionMask)>,
    pub buffer: MemoryBuffer,
    pub rng: ChaCha8Rng,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::init(cfg, &mut rng)?;
        Self::with_model(model, rng)
    }

    fn with_model(model: Model, rng: ChaCha8Rng) -> Result<Self> {
        let cfg = &model.cfg;
        let data = generate_dataset(&cfg.scene(), &model.tok, cfg.clips, cfg.data_seed)?
            .into_iter()
            .map(|(scene, motion)| (scene.clip, motion))
            .collect();
        let buffer = MemoryBuffer::new(cfg.batch);
        Ok(Self {
            model,
            data,
            buffer,
            rng,
            step: 0,
        })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.model.cfg
    }

    /// Steps the run will take in total.
    pub fn total_steps(&self) -> u64 {
        let all = self.cfg().epochs as u64 * self.cfg().steps_per_epoch();
        match self.cfg().max_steps {
            0 => all,
            m => m.min(all),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// 1-based epoch of the next step.
    pub fn epoch(&self) -> usize {
        (self.step / self.cfg().steps_per_epoch()) as usize + 1
    }

    /// Cosine-decayed autoencoder learning rate with linear warmup.
    pub fn mae_lr(&self, step: u64) -> f64 {
        let cfg = self.cfg();
        let spe = cfg.steps_per_epoch();
        let warm = cfg.lr_warmup_epochs as u64 * spe;
        let total = cfg.epochs as u64 * spe;
        if step < warm {
            cfg.mae_lr * (step + 1) as f64 / warm as f64
        } else {
            let span = total.saturating_sub(warm).max(1) as f64;
            let progress = ((step - warm) as f64 / span).min(1.0);
            cfg.mae_lr * 0.5 * (1.0 + (PI * progress).cos())
        }
    }

    /// Clip indices of the next batch; the order is reshuffled every epoch
    /// from a stream that depends only on the seed and the epoch.
    fn batch_indices(&self) -> Vec<usize> {
        let cfg = self.cfg();
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(self.epoch() as u64);
        order.shuffle(&mut rng);
        let within = (self.step % cfg.steps_per_epoch()) as usize;
        order
            .into_iter()
            .skip(within * cfg.batch)
            .take(cfg.batch)
            .collect()
    }

    /// Runs one step and returns its metrics rows (one, or two when a
    /// policy update follows).
    pub fn step(&mut self) -> Result<Vec<MetricsRow>> {
        if self.is_done() {
            return Err(TatsError::invalid("training already finished"));
        }
        let epoch = self.epoch();
        let batch = self.batch_indices();
        let mut rows = Vec::new();
        if epoch <= self.cfg().warmup_epochs {
            rows.push(self.warmup_step(&batch, epoch)?);
        } else {
            let theta = self.model.theta.checksum();
            let row = self.phase1_step(&batch, epoch);
            if self.model.theta.checksum() != theta {
                return Err(TatsError::Audit(format!(
                    "sampler parameters changed during phase 1 at step {}",
                    self.step + 1
                )));
            }
            rows.push(row?);
            let post =
                self.step + 1 - self.cfg().warmup_epochs as u64 * self.cfg().steps_per_epoch();
            if post % self.cfg().update_interval as u64 == 0 {
                let phi = self.model.phi.checksum();
                let row = self.phase2(epoch);
                if self.model.phi.checksum() != phi {
                    return Err(TatsError::Audit(format!(
                        "autoencoder parameters changed during phase 2 at step {}",
                        self.step + 1
                    )));
                }
                if let Some(r) = row? {
                    rows.push(r);
                }
            }
        }
        self.step += 1;
        Ok(rows)
    }

    fn mae_opt(&self) -> AdamW {
        let c = self.cfg();
        AdamW::new(self.mae_lr(self.step), (c.beta1, c.beta2), c.weight_decay)
    }

    /// Backpropagates one clip's loss (scaled by `1/B`) into `phi` and returns it.
    fn mae_clip(
        &mut self,
        tape: &mut Tape,
        clip_idx: usize,
        x: Var,
        mask: &MaskSpec,
        scale: f64,
    ) -> Result<f64> {
        let loss = self
            .model
            .reconstruction(tape, &self.data[clip_idx].0, x, mask)?;
        let l = tape.item(loss);
        if !l.is_finite() {
            return Err(TatsError::NonFinite(format!(
                "reconstruction loss on clip {clip_idx} at step {}",
                self.step + 1
            )));
        }
        let scaled = tape.scale(loss, scale)?;
        tape.backward(scaled)?;
        self.model.phi.accumulate_grads(tape);
        Ok(l)
    }

    fn warmup_step(&mut self, batch: &[usize], epoch: usize) -> Result<MetricsRow> {
        let (n, ratio) = (self.model.layout.tokens(), self.cfg().mask_ratio);
        let scale = 1.0 / batch.len() as f64;
        self.model.phi.zero_grad();
        let (mut lr_sum, mut hit_sum) = (0.0, 0.0);
        for &i in batch {
            let mask = random_spacetime_mask(n, ratio, &mut self.rng)?;
            let mut tape = Tape::new();
            let x = self.model.embed(&mut tape, &self.data[i].0)?;
            lr_sum += self.mae_clip(&mut tape, i, x, &mask, scale)?;
            hit_sum += motion_hit_rate(&mask, &self.data[i].1)?;
        }
        let opt = self.mae_opt();
        adamw_step(&mut self.model.phi, &opt)?;
        let mut row = MetricsRow::new(self.step + 1, epoch, Phase::Warmup);
        row.l_r = Some(lr_sum * scale);
        row.hit_rate = Some(hit_sum * scale);
        Ok(row)
    }

    fn phase1_step(&mut self, batch: &[usize], epoch: usize) -> Result<MetricsRow> {
        let ratio = self.cfg().mask_ratio;
        let scale = 1.0 / batch.len() as f64;
        self.model.theta.freeze();
        self.model.phi.zero_grad();
        let (mut lr_sum, mut hit_sum, mut ent_sum) = (0.0, 0.0, 0.0);
        let result = (|| {
            for &i in batch {
                let mut tape = Tape::new();
                let x = self.model.embed(&mut tape, &self.data[i].0)?;
                let tokens = detach(tape.value(x));

                let mut ptape = Tape::new();
                let xc = ptape.constant(&tokens.shape, tokens.values.clone())?;
                let pv = self.model.sampler.policy(
                    &mut ptape,
                    &self.model.theta,
                    xc,
                    self.model.layout,
                )?;
                let v = self
                    .model
                    .sampler
                    .value(&mut ptape, &self.model.theta, xc)?;
                let policy = PolicyOutput {
                    probs: ptape.value(pv.probs).values.clone(),
                    log_probs: ptape.value(pv.log_probs).values.clone(),
                };
                let mask = sample_visible(&policy, ratio, &mut self.rng)?;
                let lp = masked_logprob(&mut ptape, pv.log_probs, &mask.masked)?;

                let reward = self.mae_clip(&mut tape, i, x, &mask, scale)?;
                let motion = self.data[i].1.clone();
                lr_sum += reward;
                hit_sum += motion_hit_rate(&mask, &motion)?;
                ent_sum += policy.entropy();
                self.buffer.push(Episode {
                    tokens,
                    old_logprob: ptape.item(lp),
                    reward,
                    old_value: ptape.item(v),
                    masked: mask.masked,
                    motion: Some(motion),
                });
            }
            let opt = self.mae_opt();
            adamw_step(&mut self.model.phi, &opt)
        })();
        self.model.theta.unfreeze();
        result?;
        let mut row = MetricsRow::new(self.step + 1, epoch, Phase::Phase1);
        row.l_r = Some(lr_sum * scale);
        row.entropy = Some(ent_sum * scale);
        row.hit_rate = Some(hit_sum * scale);
        Ok(row)
    }

    /// One pass over the buffer, one sampler update per recorded batch,
    /// then a fresh-draw hit-rate diagnostic and a buffer reset.
    pub fn phase2(&mut self, epoch: usize) -> Result<Option<MetricsRow>> {
        if self.buffer.is_empty() {
            warn!(
                "phase 2 scheduled at step {} with an empty buffer; skipped",
                self.step + 1
            );
            return Ok(None);
        }
        let c = self.cfg().clone();
        let opt = AdamW::new(c.policy_lr, (c.beta1, c.beta2), c.policy_weight_decay);
        let k = c.ppo();
        self.model.phi.freeze();
        let mut row = MetricsRow::new(self.step + 1, epoch, Phase::Phase2);
        let result = (|| {
            let (mut ls, mut jc, mut vl, mut ent, mut rm) = (0.0, 0.0, 0.0, 0.0, 0.0);
            let mut rmax = f64::NEG_INFINITY;
            let chunks: Vec<Vec<Episode>> =
                self.buffer.batches().map(<[Episode]>::to_vec).collect();
            for eps in &chunks {
                let mut tape = Tape::new();
                let (loss, terms) = ppo_objective(
                    &mut tape,
                    &self.model.theta,
                    &self.model.sampler,
                    self.model.layout,
                    eps,
                    &k,
                )?;
                let l = tape.item(loss);
                if !l.is_finite() {
                    return Err(TatsError::NonFinite(format!(
                        "sampling loss at step {}",
                        self.step + 1
                    )));
                }
                tape.backward(loss)?;
                self.model.theta.zero_grad();
                self.model.theta.accumulate_grads(&tape);
                adamw_step(&mut self.model.theta, &opt)?;
                ls += l;
                jc += terms.j_clip;
                vl += terms.value_loss;
                ent += terms.entropy;
                rm += terms.ratio_mean;
                rmax = rmax.max(terms.ratio_max);
            }
            let b = chunks.len() as f64;
            row.l_s = Some(ls / b);
            row.j_clip = Some(jc / b);
            row.value_loss = Some(vl / b);
            row.entropy = Some(ent / b);
            row.ratio_mean = Some(rm / b);
            row.ratio_max = Some(rmax);

            let (mut hits, mut counted) = (0.0, 0usize);
            for ep in self.buffer.episodes() {
                let Some(motion) = &ep.motion else { continue };
                let (policy, _, _) = self.model.sampler.evaluate(
                    &self.model.theta,
                    &ep.tokens,
                    self.model.layout,
                )?;
                let fresh = sample_visible(&policy, c.mask_ratio, &mut self.rng)?;
                hits += motion_hit_rate(&fresh, motion)?;
                counted += 1;
            }
            row.hit_rate = (counted > 0).then(|| hits / counted as f64);
            Ok(())
        })();
        self.model.phi.unfreeze();
        self.buffer.reset();
        result?;
        Ok(Some(row))
    }

    /// Runs to completion, handing every metrics row to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        let spe = self.cfg().steps_per_epoch();
        while !self.is_done() {
            for row in self.step()? {
                sink(&row)?;
            }
            if self.step % spe == 0 {
                info!("epoch {} done ({} steps)", self.step / spe, self.step);
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg().to_text(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            phi: self.model.phi.clone(),
            theta: self.model.theta.clone(),
            episodes: self.buffer.episodes().to_vec(),
        }
    }

    /// Restores a run; the dataset is regenerated from the stored config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: TrainConfig = ck.config.parse()?;
        let mut model = Model::build(&cfg)?;
        model.phi = ck.phi.clone();
        model.theta = ck.theta.clone();
        let mut t = Self::with_model(model, ck.rng.restore())?;
        t.step = ck.step;
        ck.episodes.iter().cloned().for_each(|e| t.buffer.push(e));
        Ok(t)
    }
}

/// Model restored from a checkpoint without regenerating training data.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let cfg: TrainConfig = ck.config.parse()?;
    let mut model = Model::build(&cfg)?;
    model.phi = ck.phi.clone();
    model.theta = ck.theta.clone();
    Ok(model)
}

/// Output locations of [`pretrain`].
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

/// Full run writing `metrics.csv` and `final.ckpt` into `out`. When a
/// step fails, the state before that step is saved as `last_good.ckpt`.
pub fn pretrain(cfg: &TrainConfig, out: &Path) -> Result<RunOutputs> {
    fs::create_dir_all(out)?;
    let metrics = out.join("metrics.csv");
    let mut w = BufWriter::new(fs::File::create(&metrics)?);
    writeln!(w, "{METRICS_HEADER}")?;
    let mut trainer = Trainer::new(cfg)?;
    let mut last_good = trainer.checkpoint();
    while !trainer.is_done() {
        match trainer.step() {
            Ok(rows) => {
                for r in rows {
                    writeln!(w, "{}", r.to_csv())?;
                }
                if trainer.step % cfg.steps_per_epoch() == 0 || trainer.is_done() {
                    last_good = trainer.checkpoint();
                    w.flush()?;
                }
            }
            Err(e) => {
                w.flush()?;
                let path = out.join("last_good.ckpt");
                last_good.save(&path)?;
                warn!(
                    "aborting at step {}; last good state written to {}",
                    trainer.step + 1,
                    path.display()
                );
                return Err(e);
            }
        }
    }
    w.flush()?;
    let checkpoint = out.join("final.ckpt");
    trainer.checkpoint().save(&checkpoint)?;
    Ok(RunOutputs {
        metrics,
        checkpoint,
    })
}

/// Mean visible motion fraction for the sampler and for uniform masking on
/// the same clips.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerReport {
    pub hit_rate_tats: f64,
    pub hit_rate_random: f64,
    pub entropy: f64,
    pub clips: usize,
}

impl SamplerReport {
    pub fn ratio(&self) -> f64 {
        self.hit_rate_tats / self.hit_rate_random
    }
}

/// Evaluates the sampler on `count` held-out clips (seeds disjoint from the training set).
pub fn evaluate_sampler(model: &Model, count: usize, seed: u64) -> Result<SamplerReport> {
    let cfg = &model.cfg;
    let data = generate_dataset(&cfg.scene(), &model.tok, count, held_out_seed(cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tats, mut random, mut ent) = (0.0, 0.0, 0.0);
    for (scene, motion) in &data {
        let view = model.view(&scene.clip)?;
        let m = sample_visible(&view.policy, cfg.mask_ratio, &mut rng)?;
        tats += motion_hit_rate(&m, motion)?;
        let r = random_spacetime_mask(motion.len(), cfg.mask_ratio, &mut rng)?;
        random += motion_hit_rate(&r, motion)?;
        ent += view.policy.entropy();
    }
    let n = data.len().max(1) as f64;
    Ok(SamplerReport {
        hit_rate_tats: tats / n,
        hit_rate_random: random / n,
        entropy: ent / n,
        clips: data.len(),
    })
}

/// First data seed of the held-out split.
pub fn held_out_seed(cfg: &TrainConfig) -> u64 {
    cfg.data_seed.wrapping_add(1 << 32)
}

/// Paired linear-probe accuracies of a pretrained encoder and of freshly
/// initialized encoders on the motion-direction task.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeComparison {
    pub pretrained: Vec<f64>,
    pub random: Vec<f64>,
}

impl ProbeComparison {
    /// Repetitions where the pretrained encoder is at least as accurate.
    pub fn wins(&self) -> usize {
        self.pretrained
            .iter()
            .zip(&self.random)
            .filter(|(p, r)| p >= r)
            .count()
    }
}

/// Runs `repetitions` paired probes. Repetition `r` draws `clips` fresh
/// held-out scenes, a split seeded by `seed + r`, and a random-init
/// encoder seeded the same way; both encoders see identical data.
pub fn compare_probe(
    model: &Model,
    clips: usize,
    repetitions: usize,
    seed: u64,
) -> Result<ProbeComparison> {
    let cfg = &model.cfg;
    let mut out = ProbeComparison {
        pretrained: Vec::new(),
        random: Vec::new(),
    };
    for r in 0..repetitions as u64 {
        let base = held_out_seed(cfg).wrapping_add((r + 1) << 20);
        let data: Vec<(ClipTensor, usize)> = generate_dataset(&cfg.scene(), &model.tok, clips, base)?
            .into_iter()
            .map(|(s, _)| (s.clip, s.direction))
            .collect();
        let probe = ProbeConfig {
            classes: DIRECTIONS.len(),
            seed: seed.wrapping_add(r),
            ..Default::default()
        };
        let fresh = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(r)))?;
        let p = linear_probe_eval(&model.mae, &model.phi, &model.tok, &data, &probe)?;
        let q = linear_probe_eval(&fresh.mae, &fresh.phi, &fresh.tok, &data, &probe)?;
        info!(
            "probe repetition {r}: pretrained {:.4}, random init {:.4}",
            p.test_accuracy, q.test_accuracy
        );
        out.pretrained.push(p.test_accuracy);
        out.random.push(q.test_accuracy);
    }
    Ok(out)
}
