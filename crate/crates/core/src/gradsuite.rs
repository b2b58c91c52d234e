//! Finite-difference suites over toy instances of every differentiable
//! component (N = 8 tokens, width 8), runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::SpaceTimeLayout;
use crate::error::{Result, TatsError};
use crate::gradcheck::{check_params, finite_difference_check, worst};
use crate::mae::{reconstruction_loss, MaeConfig, MaskedAutoencoder};
use crate::optim::ParamStore;
use crate::posenc::grid_coords;
use crate::ppo::{ppo_objective, Episode, PpoCoefficients};
use crate::sampler::{masked_logprob, MaskSpec, TatsSampler};
use crate::tensor::{DiffTensor, Tape, Var};

pub const MODULES: [&str; 6] = [
    "trajectory_attention",
    "policy",
    "value",
    "masked_logprob",
    "reconstruction_loss",
    "ppo_objective",
];

const PARAM_STEP: f64 = 1e-3;
const INPUT_STEP: f64 = 1e-4;

/// Largest relative error seen by one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub module: String,
    pub max_rel_error: f64,
    pub checks: usize,
}

struct Toy {
    sampler: TatsSampler,
    store: ParamStore,
    layout: SpaceTimeLayout,
    x: DiffTensor,
    rng: ChaCha8Rng,
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> DiffTensor {
    let n = shape.iter().product();
    DiffTensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .expect("sized")
}

/// Sampler with O(1) random weights so every path carries a sizeable gradient.
fn toy(seed: u64) -> Result<Toy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = TatsSampler::new(8, 2, (8, 4))?;
    let mut store = ParamStore::new();
    sampler.init_params(&mut store, &mut rng)?;
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        for v in store.get_mut(&n).expect("listed").values.iter_mut() {
            *v = rng.gen_range(-0.4..0.4);
        }
    }
    let x = random(&[8, 8], 1.0, &mut rng);
    Ok(Toy {
        sampler,
        store,
        layout: SpaceTimeLayout::new(4, 2)?,
        x,
        rng,
    })
}

fn policy_params(n: &str) -> bool {
    n.starts_with("tats.ta.") || n == "tats.pi.w"
}

/// Runs one named suite.
pub fn run_suite(module: &str) -> Result<SuiteReport> {
    let mut checks = 0;
    let mut errs = Vec::new();
    let mut record = |e: f64| {
        checks += 1;
        errs.push(e);
    };
    match module {
        "trajectory_attention" => {
            let t = toy(1)?;
            let f = |tape: &mut Tape, x: Var, st: &ParamStore| {
                let z = t.sampler.ta.block(tape, st, x, t.layout)?.z;
                let sq = tape.square(z)?;
                tape.mean_all(sq)
            };
            record(worst(&check_params(
                &t.store,
                |tp, st| {
                    let x = tp.constant(&[8, 8], t.x.values.clone())?;
                    f(tp, x, st)
                },
                PARAM_STEP,
                |n| n.starts_with("tats.ta."),
            )?));
            record(finite_difference_check(
                |tp, x| f(tp, x, &t.store),
                &t.x,
                INPUT_STEP,
            )?);
        }
        "policy" => {
            let mut t = toy(2)?;
            let c = random(&[8], 1.0, &mut t.rng);
            let f = |tape: &mut Tape, x: Var, st: &ParamStore| {
                let p = t.sampler.policy(tape, st, x, t.layout)?.probs;
                let w = tape.constant(&[8], c.values.clone())?;
                let pw = tape.mul(p, w)?;
                tape.sum_all(pw)
            };
            record(worst(&check_params(
                &t.store,
                |tp, st| {
                    let x = tp.constant(&[8, 8], t.x.values.clone())?;
                    f(tp, x, st)
                },
                PARAM_STEP,
                policy_params,
            )?));
            record(finite_difference_check(
                |tp, x| f(tp, x, &t.store),
                &t.x,
                INPUT_STEP,
            )?);
        }
        "value" => {
            let t = toy(3)?;
            let f = |tape: &mut Tape, x: Var, st: &ParamStore| t.sampler.value(tape, st, x);
            record(worst(&check_params(
                &t.store,
                |tp, st| {
                    let x = tp.constant(&[8, 8], t.x.values.clone())?;
                    f(tp, x, st)
                },
                PARAM_STEP,
                |n| n.starts_with("tats.v."),
            )?));
            record(finite_difference_check(
                |tp, x| f(tp, x, &t.store),
                &t.x,
                INPUT_STEP,
            )?);
        }
        "masked_logprob" => {
            let t = toy(4)?;
            let masked = [0, 2, 3, 5, 7];
            let f = |tape: &mut Tape, x: Var, st: &ParamStore| {
                let lp = t.sampler.policy(tape, st, x, t.layout)?.log_probs;
                masked_logprob(tape, lp, &masked)
            };
            record(worst(&check_params(
                &t.store,
                |tp, st| {
                    let x = tp.constant(&[8, 8], t.x.values.clone())?;
                    f(tp, x, st)
                },
                PARAM_STEP,
                policy_params,
            )?));
            record(finite_difference_check(
                |tp, x| f(tp, x, &t.store),
                &t.x,
                INPUT_STEP,
            )?);
        }
        "reconstruction_loss" => {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let target = random(&[8, 6], 1.0, &mut rng);
            let pred = random(&[8, 6], 1.0, &mut rng);
            let masked = [1, 2, 4, 6, 7];
            for l2 in [false, true] {
                let f = |tape: &mut Tape, p: Var| {
                    let tg = tape.constant(&[8, 6], target.values.clone())?;
                    reconstruction_loss(tape, p, tg, &masked, l2)
                };
                record(finite_difference_check(f, &pred, INPUT_STEP)?);
            }
            // end to end through a one-block encoder and decoder
            let cfg = MaeConfig {
                enc_depth: 1,
                enc_dim: 8,
                enc_heads: 2,
                dec_depth: 1,
                dec_dim: 8,
                dec_heads: 2,
                patch_dim: 6,
                mlp_ratio: 2,
                l2_loss: false,
            };
            let mae = MaskedAutoencoder::new(cfg)?;
            let mut store = ParamStore::new();
            mae.init_params(&mut store, &mut rng)?;
            let names: Vec<String> = store.names().map(String::from).collect();
            for n in names {
                for v in store.get_mut(&n).expect("listed").values.iter_mut() {
                    *v += rng.gen_range(-0.3..0.3);
                }
            }
            let x = random(&[8, 8], 1.0, &mut rng);
            let mask = MaskSpec::from_visible(8, vec![0, 3, 5])?;
            let coords = grid_coords(2, 2, 2);
            let f = |tape: &mut Tape, st: &ParamStore| {
                let xv = tape.constant(&[8, 8], x.values.clone())?;
                let tg = tape.constant(&[8, 6], target.values.clone())?;
                Ok(mae.forward(tape, st, xv, &mask, &coords, tg)?.loss)
            };
            record(worst(&check_params(&store, f, PARAM_STEP, |_| true)?));
        }
        "ppo_objective" => {
            let mut t = toy(6)?;
            let episodes: Vec<Episode> = (0..2)
                .map(|i| Episode {
                    tokens: random(&[8, 8], 1.0, &mut t.rng),
                    old_logprob: -6.0 - 0.3 * i as f64,
                    reward: 0.4 + 0.5 * i as f64,
                    old_value: 0.3,
                    masked: if i == 0 {
                        vec![0, 1, 4, 6, 7]
                    } else {
                        vec![1, 2, 3, 5, 6]
                    },
                    motion: None,
                })
                .collect();
            let k = PpoCoefficients {
                c1: 1.0,
                c2: 0.5,
                c3: 0.1,
                ..Default::default()
            };
            let f = |tp: &mut Tape, st: &ParamStore| {
                Ok(ppo_objective(tp, st, &t.sampler, t.layout, &episodes, &k)?.0)
            };
            record(worst(&check_params(&t.store, f, PARAM_STEP, |n| {
                n != "tats.pi.b"
            })?));
        }
        other => {
            return Err(TatsError::invalid(format!(
                "unknown gradcheck module `{other}` (expected one of {})",
                MODULES.join(", ")
            )))
        }
    }
    let max_rel_error = errs.into_iter().fold(0.0, f64::max);
    Ok(SuiteReport {
        module: module.to_string(),
        max_rel_error,
        checks,
    })
}
