//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied during a forward pass as a
//! node in a Wengert list. [`Tape::backward`] walks the list in reverse and
//! propagates adjoints with the chain rule.
//!
//! Gradient semantics: every call to `backward` recomputes the adjoints of
//! intermediate nodes from scratch but *adds* into the `grad` of leaf nodes,
//! so repeated calls without [`Tape::zero_grad`] accumulate.

pub(crate) mod gemm;
mod ops;

use std::collections::HashMap;

use crate::error::{Result, TatsError};
use crate::optim::ParamStore;

pub use ops::OpKind;

/// Dense row-major tensor that may participate in differentiation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl DiffTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(TatsError::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", values.len()),
            ));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.values.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TatsError::shape("tensor", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.values[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all extents after the first.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Origin {
    Leaf,
    Op { kind: OpKind, inputs: Vec<Var> },
}

#[derive(Debug)]
struct Node {
    tensor: DiffTensor,
    origin: Origin,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: HashMap<String, Var>,
    macs: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of every matrix product recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn leaf(&mut self, tensor: DiffTensor) -> Var {
        self.nodes.push(Node {
            tensor,
            origin: Origin::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(DiffTensor::new(shape.to_vec(), values)?))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(DiffTensor::scalar(value))
    }

    /// Binds a named parameter as a leaf. Binding the same name twice returns
    /// the same node. Parameters of a frozen store are bound without gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| TatsError::UnknownParam(name.to_string()))?;
        let mut t = DiffTensor::new(p.shape.clone(), p.values.clone())?;
        t.requires_grad = !store.is_frozen();
        let v = self.leaf(t);
        self.bindings.insert(name.to_string(), v);
        Ok(v)
    }

    pub(crate) fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bindings.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn value(&self, v: Var) -> &DiffTensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.zero_grad();
        }
    }

    /// Records `kind` applied to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let args: Vec<&DiffTensor> = inputs.iter().map(|v| &self.nodes[v.0].tensor).collect();
        let (shape, values, macs) = ops::forward(&kind, &args)?;
        let requires_grad = args.iter().any(|t| t.requires_grad);
        self.macs += macs;
        let tensor = DiffTensor {
            shape,
            values,
            requires_grad,
            grad: None,
        };
        self.nodes.push(Node {
            tensor,
            origin: Origin::Op {
                kind,
                inputs: inputs.to_vec(),
            },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates d(output)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = &self.nodes[output.0].tensor;
        if !out.is_scalar() {
            return Err(TatsError::shape(
                "backward",
                format!("output must be scalar, got shape {:?}", out.shape),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if let Origin::Op { kind, inputs } = &node.origin {
                if node.tensor.requires_grad {
                    let args: Vec<&DiffTensor> =
                        inputs.iter().map(|v| &self.nodes[v.0].tensor).collect();
                    let needs: Vec<bool> = args.iter().map(|t| t.requires_grad).collect();
                    let grads = ops::backward(kind, &args, &node.tensor, &g, &needs)?;
                    for (input, ig) in inputs.iter().zip(grads) {
                        let Some(ig) = ig else { continue };
                        match &mut adj[input.0] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
            let node = &mut self.nodes[i];
            if node.tensor.requires_grad {
                match (&node.origin, node.tensor.grad.as_mut()) {
                    (Origin::Leaf, Some(acc)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    _ => node.tensor.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.apply(OpKind::BatchMatMul { trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Div, &[a, b])
    }

    /// Adds a vector along the last axis of every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.apply(OpKind::AddBias, &[x, bias])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Gelu, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clip { lo, hi }, &[x])
    }

    /// Element-wise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Min, &[a, b])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Softmax { axis }, &[x])
    }

    /// `x - logsumexp(x)` along `axis`; finite even where the softmax underflows.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::LogSoftmax { axis }, &[x])
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Sum { axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Mean { axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::SumAll, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::MeanAll, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        self.apply(OpKind::GatherRows(index.to_vec()), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatRows, parts)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(OpKind::Permute(axes.to_vec()), &[x])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.apply(OpKind::LayerNorm { eps }, &[x, gain, bias])
    }

    /// `x @ w + b` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }
}
