//! Central finite-difference gradient checking.
//!
//! Derivatives are estimated with the five-point stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, whose `O(h^4)`
//! truncation error lets a fairly wide step keep rounding noise small.
//!
//! The reported error for one coordinate is
//! `|analytic - numeric| / max(1e-8, |numeric|)`; the checkers return the
//! maximum over all coordinates.

use crate::error::{Result, TatsError};
use crate::optim::ParamStore;
use crate::tensor::{DiffTensor, Tape, Var};

const DENOM_FLOOR: f64 = 1e-8;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(DENOM_FLOOR)
}

fn five_point(
    mut eval: impl FnMut(f64) -> Result<f64>,
    x: f64,
    h: f64,
    what: impl Fn() -> String,
) -> Result<f64> {
    let mut at = |k: f64| -> Result<f64> {
        let v = eval(x + k * h)?;
        finite(v, || format!("{} ({k:+}h)", what()))
    };
    let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
    // differences first, so inputs that do not affect the output give exactly zero
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

fn finite(v: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TatsError::NonFinite(what()))
    }
}

/// Checks the gradient of `f` with respect to `x`.
///
/// `f` receives a fresh tape and the node holding `x`, and must return a
/// scalar node.
pub fn finite_difference_check<F>(f: F, x: &DiffTensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(TatsError::invalid(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(DiffTensor::new(x.shape.clone(), values)?);
        let out = f(&mut tape, v)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(DiffTensor::new(x.shape.clone(), x.values.clone())?.requires_grad());
    let out = f(&mut tape, xv)?;
    finite(tape.item(out), || "output".into())?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let numeric = five_point(
            |v| {
                let mut shifted = x.values.clone();
                shifted[i] = v;
                eval(shifted)
            },
            x.values[i],
            step,
            || format!("coordinate {i}"),
        )?;
        let a = finite(analytic[i], || format!("coordinate {i} (analytic)"))?;
        worst = worst.max(rel_error(a, numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

/// Checks the gradient of `f` with respect to every parameter in `store`
/// accepted by `include`.
pub fn check_params<F, P>(
    store: &ParamStore,
    f: F,
    step: f64,
    include: P,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    P: Fn(&str) -> bool,
{
    if step <= 0.0 {
        return Err(TatsError::invalid(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    finite(tape.item(out), || "output".into())?;
    tape.backward(out)?;
    let mut grads = store.clone();
    grads.zero_grad();
    grads.accumulate_grads(&tape);

    let mut scratch = store.clone();
    let mut report = Vec::new();
    let names: Vec<String> = store
        .names()
        .filter(|n| include(n))
        .map(str::to_string)
        .collect();
    for name in names {
        let analytic = grads
            .get(&name)
            .and_then(|t| t.grad.clone())
            .unwrap_or_else(|| vec![0.0; store.get(&name).map_or(0, DiffTensor::numel)]);
        let n = analytic.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = store.get(&name).expect("listed").values[i];
            let eval = |v: f64| -> Result<f64> {
                scratch.get_mut(&name).expect("listed").values[i] = v;
                let mut t = Tape::new();
                let o = f(&mut t, &scratch)?;
                Ok(t.item(o))
            };
            let numeric = five_point(eval, orig, step, || format!("{name}[{i}]"));
            scratch.get_mut(&name).expect("listed").values[i] = orig;
            worst = worst.max(rel_error(analytic[i], numeric?));
        }
        report.push(ParamCheck {
            name,
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Largest error in a [`check_params`] report.
pub fn worst(report: &[ParamCheck]) -> f64 {
    report.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> DiffTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        DiffTensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let x = random(&[4, 3], 1);
        let err = finite_difference_check(|t, v| t.sum_all(v), &x, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn mean_of_squares_seed_7() {
        let x = random(&[3, 3], 7);
        let err = finite_difference_check(
            |t, v| {
                let s = t.square(v)?;
                t.mean_all(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = random(&[2], 0);
        assert!(finite_difference_check(|t, v| t.sum_all(v), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_names_coordinate() {
        // log is undefined below zero: coordinate 1 sits at -0.5
        let x = DiffTensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let err = finite_difference_check(
            |t, v| {
                let l = t.log(v)?;
                t.sum_all(l)
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, TatsError::NonFinite(_)), "{err}");
    }
}
