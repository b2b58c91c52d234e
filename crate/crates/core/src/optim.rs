//! Named parameter storage and the AdamW update rule.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TatsError};
use crate::tensor::{DiffTensor, Tape};

/// First/second moment accumulators for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: DiffTensor,
    /// Whether decoupled weight decay applies (off for biases and norm gains).
    pub decay: bool,
    pub state: AdamState,
}

/// Parameters keyed by unique name, iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: DiffTensor, decay: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(TatsError::invalid(format!("duplicate parameter `{name}`")));
        }
        let n = tensor.numel();
        let state = AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        };
        let tensor = DiffTensor {
            requires_grad: true,
            grad: None,
            ..tensor
        };
        self.params.insert(
            name.to_string(),
            Param {
                tensor,
                decay,
                state,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DiffTensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DiffTensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.grad = None;
        }
    }

    /// Adds the gradients of every parameter of this store bound on `tape`.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (name, var) in tape.bindings() {
            let (Some(p), Some(g)) = (self.params.get_mut(name), tape.grad(var)) else {
                continue;
            };
            match p.tensor.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => p.tensor.grad = Some(g.to_vec()),
            }
        }
    }

    /// Hash over every parameter's name, shape and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, p) in &self.params {
            name.hash(&mut h);
            p.tensor.shape.hash(&mut h);
            for v in &p.tensor.values {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Fills a new parameter from a truncated normal (cut at two standard deviations).
    pub fn init_trunc_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| trunc_normal(rng) * std).collect();
        self.insert(name, DiffTensor::new(shape.to_vec(), values)?, true)
    }

    pub fn init_const(
        &mut self,
        name: &str,
        shape: &[usize],
        value: f64,
        decay: bool,
    ) -> Result<()> {
        self.insert(name, DiffTensor::full(shape, value), decay)
    }
}

fn trunc_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One bias-corrected AdamW update of every parameter in `store`.
///
/// Fails without touching any parameter if one of them has no gradient.
pub fn adamw_step(store: &mut ParamStore, opt: &AdamW) -> Result<()> {
    if let Some((name, _)) = store.params.iter().find(|(_, p)| p.tensor.grad.is_none()) {
        return Err(TatsError::MissingGrad(name.clone()));
    }
    for p in store.params.values_mut() {
        let g = p.tensor.grad.as_ref().expect("checked above");
        let st = &mut p.state;
        st.step += 1;
        let bc1 = 1.0 - opt.beta1.powi(st.step as i32);
        let bc2 = 1.0 - opt.beta2.powi(st.step as i32);
        let decay = if p.decay {
            opt.lr * opt.weight_decay
        } else {
            0.0
        };
        for i in 0..g.len() {
            st.m[i] = opt.beta1 * st.m[i] + (1.0 - opt.beta1) * g[i];
            st.v[i] = opt.beta2 * st.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            let w = &mut p.tensor.values[i];
            *w -= decay * *w;
            *w -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}
