//! Sampler and representation evaluation on synthetic clips.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TatsError};
use crate::mae::MaskedAutoencoder;
use crate::optim::{adamw_step, AdamW, ParamStore};
use crate::sampler::MaskSpec;
use crate::tensor::Tape;
use crate::tokenizer::{tokenize, ClipTensor, TokenizerConfig};

/// Fraction of visible tokens that are motion tokens.
pub fn motion_hit_rate(mask: &MaskSpec, motion: &[bool]) -> Result<f64> {
    if motion.len() != mask.tokens {
        return Err(TatsError::shape(
            "motion_hit_rate",
            format!("{} motion flags for {} tokens", motion.len(), mask.tokens),
        ));
    }
    if mask.visible.is_empty() {
        return Ok(0.0);
    }
    let hits = mask.visible.iter().filter(|&&i| motion[i]).count();
    Ok(hits as f64 / mask.visible.len() as f64)
}

/// Mean-pooled encoder features of every token of `clip` (no masking).
pub fn encoder_features(
    mae: &MaskedAutoencoder,
    phi: &ParamStore,
    cfg: &TokenizerConfig,
    clip: &ClipTensor,
) -> Result<Vec<f64>> {
    let grid = tokenize(clip, cfg, phi)?;
    let mut tape = Tape::new();
    let x = tape.constant(&grid.tokens.shape, grid.tokens.values.clone())?;
    let f = mae.encode(&mut tape, phi, x)?;
    let m = tape.mean(f, 0)?;
    Ok(tape.value(m).values.clone())
}

/// Options for [`linear_probe_eval`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub classes: usize,
    /// Fraction of examples used for training; the rest are held out.
    pub train_fraction: f64,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            train_fraction: 0.75,
            iterations: 300,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Softmax regression on fixed features, trained full-batch with Adam on a
/// seeded split, evaluated on the held-out part.
pub fn fit_linear_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let n = features.len();
    if n != labels.len() || n < 2 {
        return Err(TatsError::invalid(format!(
            "{n} feature rows for {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(TatsError::invalid(format!(
            "label {bad} outside {} classes",
            cfg.classes
        )));
    }
    let mut counts = vec![0usize; cfg.classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    let (lo, hi) = (
        counts.iter().min().copied().unwrap_or(0),
        counts.iter().max().copied().unwrap_or(0),
    );
    if lo == 0 || hi > 10 * lo {
        warn!("class imbalance beyond 10:1 in probe labels: {counts:?}");
    }
    let d = features[0].len();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);

    // standardize with training statistics
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in train {
        features[i]
            .iter()
            .enumerate()
            .for_each(|(j, v)| mean[j] += v / n_train as f64);
    }
    for &i in train {
        features[i]
            .iter()
            .enumerate()
            .for_each(|(j, v)| std[j] += (v - mean[j]).powi(2) / n_train as f64);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    let (mean, std) = (&mean, &std);
    let matrix = |rows: &[usize]| -> Vec<f64> {
        rows.iter()
            .flat_map(|&i| (0..d).map(move |j| (features[i][j] - mean[j]) / std[j]))
            .collect()
    };
    let (xtr, xte) = (matrix(train), matrix(test));

    let k = cfg.classes;
    let mut store = ParamStore::new();
    store.init_const("probe.w", &[d, k], 0.0, true)?;
    store.init_const("probe.b", &[k], 0.0, false)?;
    let opt = AdamW::new(cfg.lr, (0.9, 0.999), 1e-4);
    let picks: Vec<usize> = train
        .iter()
        .enumerate()
        .map(|(r, &i)| r * k + labels[i])
        .collect();
    for _ in 0..cfg.iterations {
        let mut tape = Tape::new();
        let x = tape.constant(&[n_train, d], xtr.clone())?;
        let w = tape.param(&store, "probe.w")?;
        let b = tape.param(&store, "probe.b")?;
        let logits = tape.linear(x, w, Some(b))?;
        let p = tape.softmax(logits, 1)?;
        let lp = tape.log(p)?;
        let flat = tape.reshape(lp, &[n_train * k, 1])?;
        let picked = tape.gather_rows(flat, &picks)?;
        let nll = tape.mean_all(picked)?;
        let loss = tape.scale(nll, -1.0)?;
        tape.backward(loss)?;
        store.zero_grad();
        store.accumulate_grads(&tape);
        adamw_step(&mut store, &opt)?;
    }

    let w = &store.get("probe.w").expect("probe weights").values;
    let b = &store.get("probe.b").expect("probe bias").values;
    let accuracy = |x: &[f64], rows: &[usize]| -> f64 {
        let correct = rows
            .iter()
            .enumerate()
            .filter(|&(r, &i)| {
                let row = &x[r * d..(r + 1) * d];
                let score = |c: usize| {
                    b[c] + row
                        .iter()
                        .enumerate()
                        .map(|(j, v)| v * w[j * k + c])
                        .sum::<f64>()
                };
                let best = (0..k)
                    .max_by(|&a, &c| score(a).total_cmp(&score(c)).then(c.cmp(&a)))
                    .expect("classes");
                best == labels[i]
            })
            .count();
        correct as f64 / rows.len() as f64
    };
    Ok(ProbeReport {
        train_accuracy: accuracy(&xtr, train),
        test_accuracy: accuracy(&xte, test),
        train_size: train.len(),
        test_size: test.len(),
    })
}

/// Linear-probe accuracy of a frozen encoder on labelled clips.
pub fn linear_probe_eval(
    mae: &MaskedAutoencoder,
    phi: &ParamStore,
    tok: &TokenizerConfig,
    clips: &[(ClipTensor, usize)],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let features = clips
        .iter()
        .map(|(c, _)| encoder_features(mae, phi, tok, c))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = clips.iter().map(|(_, l)| *l).collect();
    fit_linear_probe(&features, &labels, cfg)
}
