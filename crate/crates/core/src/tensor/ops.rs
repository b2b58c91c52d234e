use super::gemm::{gemm, MatRef};
use super::DiffTensor;
use crate::error::{Result, TatsError};

/// Operation recorded on a tape, with its static attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    BatchMatMul { trans_b: bool },
    Add,
    Sub,
    Mul,
    Div,
    AddBias,
    Exp,
    Log,
    Relu,
    Gelu,
    Sqrt,
    Square,
    Scale(f64),
    Clip { lo: f64, hi: f64 },
    Min,
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    Sum { axis: usize },
    Mean { axis: usize },
    SumAll,
    MeanAll,
    GatherRows(Vec<usize>),
    ConcatRows,
    Transpose,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    LayerNorm { eps: f64 },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul { .. } => "bmm",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AddBias => "add_bias",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Scale(_) => "scale",
            OpKind::Clip { .. } => "clip",
            OpKind::Min => "min",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LogSoftmax { .. } => "log_softmax",
            OpKind::Sum { .. } => "sum",
            OpKind::Mean { .. } => "mean",
            OpKind::SumAll => "sum_all",
            OpKind::MeanAll => "mean_all",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Transpose => "transpose",
            OpKind::Reshape(_) => "reshape",
            OpKind::Permute(_) => "permute",
            OpKind::LayerNorm { .. } => "layer_norm",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul
            | OpKind::BatchMatMul { .. }
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::AddBias
            | OpKind::Min => Some(2),
            OpKind::LayerNorm { .. } => Some(3),
            OpKind::ConcatRows => None,
            _ => Some(1),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves data laid out as `shape` into the order given by `axes`.
fn permute_values(values: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(values.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..values.len() {
        out.push(values[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

fn same_shape(op: &'static str, a: &DiffTensor, b: &DiffTensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TatsError::shape(
            op,
            format!("{:?} vs {:?}", a.shape, b.shape),
        ));
    }
    Ok(())
}

fn unary(x: &DiffTensor, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>, u64) {
    (x.shape.clone(), x.values.iter().map(|&v| f(v)).collect(), 0)
}

fn binary(
    a: &DiffTensor,
    b: &DiffTensor,
    f: impl Fn(f64, f64) -> f64,
) -> (Vec<usize>, Vec<f64>, u64) {
    let v = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| f(x, y))
        .collect();
    (a.shape.clone(), v, 0)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TatsError::shape(
            op,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    Ok(())
}

/// Forward evaluation: output shape, values and multiply-accumulate count.
pub(super) fn forward(kind: &OpKind, x: &[&DiffTensor]) -> Result<(Vec<usize>, Vec<f64>, u64)> {
    let op = kind.name();
    if let Some(n) = kind.arity() {
        if x.len() != n {
            return Err(TatsError::shape(
                op,
                format!("expected {n} inputs, got {}", x.len()),
            ));
        }
    }
    Ok(match kind {
        OpKind::MatMul => {
            let (a, b) = (x[0], x[1]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TatsError::shape(
                    op,
                    format!("{:?} x {:?}", a.shape, b.shape),
                ));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            gemm(
                MatRef::new(&a.values, m, k),
                MatRef::new(&b.values, k, n),
                0.0,
                &mut out,
            );
            (vec![m, n], out, (m * k * n) as u64)
        }
        OpKind::BatchMatMul { trans_b } => {
            let (a, b) = (x[0], x[1]);
            let bad = || {
                TatsError::shape(
                    op,
                    format!("{:?} x {:?} (trans_b={trans_b})", a.shape, b.shape),
                )
            };
            if a.shape.len() != 3 || b.shape.len() != 3 || a.shape[0] != b.shape[0] {
                return Err(bad());
            }
            let (bs, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
            let (bk, n) = if *trans_b {
                (b.shape[2], b.shape[1])
            } else {
                (b.shape[1], b.shape[2])
            };
            if bk != k {
                return Err(bad());
            }
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                let am = MatRef::new(&a.values[i * m * k..(i + 1) * m * k], m, k);
                let bsl = &b.values[i * k * n..(i + 1) * k * n];
                let bm = if *trans_b {
                    MatRef::new(bsl, n, k).t()
                } else {
                    MatRef::new(bsl, k, n)
                };
                gemm(am, bm, 0.0, &mut out[i * m * n..(i + 1) * m * n]);
            }
            (vec![bs, m, n], out, (bs * m * k * n) as u64)
        }
        OpKind::Add => {
            same_shape(op, x[0], x[1])?;
            binary(x[0], x[1], |a, b| a + b)
        }
        OpKind::Sub => {
            same_shape(op, x[0], x[1])?;
            binary(x[0], x[1], |a, b| a - b)
        }
        OpKind::Mul => {
            same_shape(op, x[0], x[1])?;
            binary(x[0], x[1], |a, b| a * b)
        }
        OpKind::Div => {
            same_shape(op, x[0], x[1])?;
            binary(x[0], x[1], |a, b| a / b)
        }
        OpKind::Min => {
            same_shape(op, x[0], x[1])?;
            binary(x[0], x[1], f64::min)
        }
        OpKind::AddBias => {
            let (a, b) = (x[0], x[1]);
            let n = a.shape.last().copied().unwrap_or(1);
            if b.shape != [n] {
                return Err(TatsError::shape(
                    op,
                    format!("{:?} + bias {:?}", a.shape, b.shape),
                ));
            }
            let mut out = a.values.clone();
            for row in out.chunks_mut(n.max(1)) {
                row.iter_mut().zip(&b.values).for_each(|(v, bb)| *v += bb);
            }
            (a.shape.clone(), out, 0)
        }
        OpKind::Exp => unary(x[0], f64::exp),
        OpKind::Log => unary(x[0], f64::ln),
        OpKind::Relu => unary(x[0], |v| v.max(0.0)),
        OpKind::Gelu => unary(x[0], |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        }),
        OpKind::Sqrt => unary(x[0], f64::sqrt),
        OpKind::Square => unary(x[0], |v| v * v),
        OpKind::Scale(c) => unary(x[0], |v| v * c),
        OpKind::Clip { lo, hi } => {
            if lo > hi {
                return Err(TatsError::invalid(format!("clip bounds [{lo}, {hi}]")));
            }
            unary(x[0], |v| v.clamp(*lo, *hi))
        }
        OpKind::Softmax { axis } => {
            let t = x[0];
            check_axis(op, &t.shape, *axis)?;
            let (outer, len, inner) = split_axis(&t.shape, *axis);
            if len == 0 {
                return Err(TatsError::shape(
                    op,
                    format!("empty axis {axis} in {:?}", t.shape),
                ));
            }
            let mut out = vec![0.0; t.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let max = (0..len)
                        .map(|j| t.values[at(j)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..len {
                        let e = (t.values[at(j)] - max).exp();
                        out[at(j)] = e;
                        z += e;
                    }
                    for j in 0..len {
                        out[at(j)] /= z;
                    }
                }
            }
            (t.shape.clone(), out, 0)
        }
        OpKind::LogSoftmax { axis } => {
            let t = x[0];
            check_axis(op, &t.shape, *axis)?;
            let (outer, len, inner) = split_axis(&t.shape, *axis);
            if len == 0 {
                return Err(TatsError::shape(
                    op,
                    format!("empty axis {axis} in {:?}", t.shape),
                ));
            }
            let mut out = vec![0.0; t.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let max = (0..len)
                        .map(|j| t.values[at(j)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let lz = (0..len)
                        .map(|j| (t.values[at(j)] - max).exp())
                        .sum::<f64>()
                        .ln();
                    for j in 0..len {
                        out[at(j)] = t.values[at(j)] - max - lz;
                    }
                }
            }
            (t.shape.clone(), out, 0)
        }
        OpKind::Sum { axis } | OpKind::Mean { axis } => {
            let t = x[0];
            check_axis(op, &t.shape, *axis)?;
            let (outer, len, inner) = split_axis(&t.shape, *axis);
            let scale = if matches!(kind, OpKind::Mean { .. }) {
                if len == 0 {
                    return Err(TatsError::shape(op, "mean over empty axis"));
                }
                1.0 / len as f64
            } else {
                1.0
            };
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let src = &t.values[(o * len + j) * inner..(o * len + j + 1) * inner];
                    out[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
            }
            out.iter_mut().for_each(|v| *v *= scale);
            let mut shape = t.shape.clone();
            shape.remove(*axis);
            (shape, out, 0)
        }
        OpKind::SumAll => (vec![], vec![x[0].values.iter().sum()], 0),
        OpKind::MeanAll => {
            if x[0].numel() == 0 {
                return Err(TatsError::shape(op, "mean of empty tensor"));
            }
            (
                vec![],
                vec![x[0].values.iter().sum::<f64>() / x[0].numel() as f64],
                0,
            )
        }
        OpKind::GatherRows(index) => {
            let t = x[0];
            if t.shape.is_empty() {
                return Err(TatsError::shape(op, "cannot gather rows of a 0-d tensor"));
            }
            let rows = t.shape[0];
            let w = t.row_len();
            let mut out = Vec::with_capacity(index.len() * w);
            for &i in index {
                if i >= rows {
                    return Err(TatsError::shape(
                        op,
                        format!("row {i} out of range for {:?}", t.shape),
                    ));
                }
                out.extend_from_slice(&t.values[i * w..(i + 1) * w]);
            }
            let mut shape = t.shape.clone();
            shape[0] = index.len();
            (shape, out, 0)
        }
        OpKind::ConcatRows => {
            let first = x.first().ok_or_else(|| TatsError::shape(op, "no inputs"))?;
            if first.shape.is_empty() {
                return Err(TatsError::shape(op, "cannot concatenate 0-d tensors"));
            }
            let tail = &first.shape[1..];
            let mut rows = 0;
            let mut out = Vec::new();
            for t in x {
                if t.shape.len() != first.shape.len() || &t.shape[1..] != tail {
                    return Err(TatsError::shape(
                        op,
                        format!("{:?} vs {:?}", first.shape, t.shape),
                    ));
                }
                rows += t.shape[0];
                out.extend_from_slice(&t.values);
            }
            let mut shape = first.shape.clone();
            shape[0] = rows;
            (shape, out, 0)
        }
        OpKind::Transpose => {
            let t = x[0];
            if t.shape.len() != 2 {
                return Err(TatsError::shape(
                    op,
                    format!("expected 2-d, got {:?}", t.shape),
                ));
            }
            let (s, v) = permute_values(&t.values, &t.shape, &[1, 0]);
            (s, v, 0)
        }
        OpKind::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if n != x[0].numel() {
                return Err(TatsError::shape(
                    op,
                    format!("{:?} -> {shape:?}", x[0].shape),
                ));
            }
            (shape.clone(), x[0].values.clone(), 0)
        }
        OpKind::Permute(axes) => {
            let t = x[0];
            let mut seen = vec![false; t.shape.len()];
            let valid = axes.len() == t.shape.len()
                && axes
                    .iter()
                    .all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
            if !valid {
                return Err(TatsError::shape(
                    op,
                    format!("axes {axes:?} for {:?}", t.shape),
                ));
            }
            let (s, v) = permute_values(&t.values, &t.shape, axes);
            (s, v, 0)
        }
        OpKind::LayerNorm { eps } => {
            let (t, g, b) = (x[0], x[1], x[2]);
            let n = t.shape.last().copied().unwrap_or(0);
            if n == 0 || g.shape != [n] || b.shape != [n] {
                return Err(TatsError::shape(
                    op,
                    format!("{:?} with gain {:?} bias {:?}", t.shape, g.shape, b.shape),
                ));
            }
            let mut out = vec![0.0; t.numel()];
            for (row, o) in t.values.chunks(n).zip(out.chunks_mut(n)) {
                let (mu, rstd) = layer_norm_stats(row, *eps);
                for j in 0..n {
                    o[j] = (row[j] - mu) * rstd * g.values[j] + b.values[j];
                }
            }
            (t.shape.clone(), out, 0)
        }
    })
}

/// Vector-Jacobian products for each input that `needs` a gradient.
pub(super) fn backward(
    kind: &OpKind,
    x: &[&DiffTensor],
    y: &DiffTensor,
    g: &[f64],
    needs: &[bool],
) -> Result<Vec<Option<Vec<f64>>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; x.len()];
    let want = |i: usize| needs[i];
    match kind {
        OpKind::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let gm = MatRef::new(g, m, n);
            if want(0) {
                let mut ga = vec![0.0; m * k];
                gemm(gm, MatRef::new(&b.values, k, n).t(), 0.0, &mut ga);
                grads[0] = Some(ga);
            }
            if want(1) {
                let mut gb = vec![0.0; k * n];
                gemm(MatRef::new(&a.values, m, k).t(), gm, 0.0, &mut gb);
                grads[1] = Some(gb);
            }
        }
        OpKind::BatchMatMul { trans_b } => {
            let (a, b) = (x[0], x[1]);
            let (bs, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
            let n = y.shape[2];
            let mut ga = want(0).then(|| vec![0.0; bs * m * k]);
            let mut gb = want(1).then(|| vec![0.0; bs * k * n]);
            for i in 0..bs {
                let gi = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                let ai = MatRef::new(&a.values[i * m * k..(i + 1) * m * k], m, k);
                let bsl = &b.values[i * k * n..(i + 1) * k * n];
                if let Some(ga) = ga.as_mut() {
                    // trans_b: b_i is [n, k] so g_i b_i; else g_i b_i^T
                    let bm = if *trans_b {
                        MatRef::new(bsl, n, k)
                    } else {
                        MatRef::new(bsl, k, n).t()
                    };
                    gemm(gi, bm, 0.0, &mut ga[i * m * k..(i + 1) * m * k]);
                }
                if let Some(gb) = gb.as_mut() {
                    let out = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        gemm(gi.t(), ai, 0.0, out);
                    } else {
                        gemm(ai.t(), gi, 0.0, out);
                    }
                }
            }
            grads[0] = ga;
            grads[1] = gb;
        }
        OpKind::Add => {
            if want(0) {
                grads[0] = Some(g.to_vec());
            }
            if want(1) {
                grads[1] = Some(g.to_vec());
            }
        }
        OpKind::Sub => {
            if want(0) {
                grads[0] = Some(g.to_vec());
            }
            if want(1) {
                grads[1] = Some(g.iter().map(|v| -v).collect());
            }
        }
        OpKind::Mul => {
            let (a, b) = (x[0], x[1]);
            if want(0) {
                grads[0] = Some(g.iter().zip(&b.values).map(|(g, b)| g * b).collect());
            }
            if want(1) {
                grads[1] = Some(g.iter().zip(&a.values).map(|(g, a)| g * a).collect());
            }
        }
        OpKind::Div => {
            let (a, b) = (x[0], x[1]);
            if want(0) {
                grads[0] = Some(g.iter().zip(&b.values).map(|(g, b)| g / b).collect());
            }
            if want(1) {
                grads[1] = Some(
                    g.iter()
                        .zip(a.values.iter().zip(&b.values))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect(),
                );
            }
        }
        OpKind::Min => {
            let (a, b) = (x[0], x[1]);
            let a_wins: Vec<bool> = a
                .values
                .iter()
                .zip(&b.values)
                .map(|(a, b)| a <= b)
                .collect();
            if want(0) {
                grads[0] = Some(
                    g.iter()
                        .zip(&a_wins)
                        .map(|(&g, &w)| if w { g } else { 0.0 })
                        .collect(),
                );
            }
            if want(1) {
                grads[1] = Some(
                    g.iter()
                        .zip(&a_wins)
                        .map(|(&g, &w)| if w { 0.0 } else { g })
                        .collect(),
                );
            }
        }
        OpKind::AddBias => {
            if want(0) {
                grads[0] = Some(g.to_vec());
            }
            if want(1) {
                let n = x[1].numel();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n.max(1)) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                grads[1] = Some(gb);
            }
        }
        OpKind::Exp => grads[0] = Some(g.iter().zip(&y.values).map(|(g, y)| g * y).collect()),
        OpKind::Log => grads[0] = Some(g.iter().zip(&x[0].values).map(|(g, x)| g / x).collect()),
        OpKind::Relu => {
            grads[0] = Some(
                g.iter()
                    .zip(&x[0].values)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
            )
        }
        OpKind::Gelu => {
            grads[0] = Some(
                g.iter()
                    .zip(&x[0].values)
                    .map(|(&g, &v)| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                    })
                    .collect(),
            )
        }
        OpKind::Sqrt => {
            grads[0] = Some(
                g.iter()
                    .zip(&y.values)
                    .map(|(g, y)| g / (2.0 * y))
                    .collect(),
            )
        }
        OpKind::Square => {
            grads[0] = Some(
                g.iter()
                    .zip(&x[0].values)
                    .map(|(g, x)| 2.0 * g * x)
                    .collect(),
            )
        }
        OpKind::Scale(c) => grads[0] = Some(g.iter().map(|g| g * c).collect()),
        OpKind::Clip { lo, hi } => {
            grads[0] = Some(
                g.iter()
                    .zip(&x[0].values)
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { 0.0 })
                    .collect(),
            )
        }
        OpKind::Softmax { axis } => {
            let (outer, len, inner) = split_axis(&y.shape, *axis);
            let mut gx = vec![0.0; y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * y.values[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = y.values[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            grads[0] = Some(gx);
        }
        OpKind::LogSoftmax { axis } => {
            let (outer, len, inner) = split_axis(&y.shape, *axis);
            let mut gx = vec![0.0; y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = g[at(j)] - y.values[at(j)].exp() * total;
                    }
                }
            }
            grads[0] = Some(gx);
        }
        OpKind::Sum { axis } | OpKind::Mean { axis } => {
            let (outer, len, inner) = split_axis(&x[0].shape, *axis);
            let scale = if matches!(kind, OpKind::Mean { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut gx = vec![0.0; x[0].numel()];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for j in 0..len {
                    let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * scale);
                }
            }
            grads[0] = Some(gx);
        }
        OpKind::SumAll => grads[0] = Some(vec![g[0]; x[0].numel()]),
        OpKind::MeanAll => grads[0] = Some(vec![g[0] / x[0].numel() as f64; x[0].numel()]),
        OpKind::GatherRows(index) => {
            let w = x[0].row_len();
            let mut gx = vec![0.0; x[0].numel()];
            for (k, &i) in index.iter().enumerate() {
                gx[i * w..(i + 1) * w]
                    .iter_mut()
                    .zip(&g[k * w..(k + 1) * w])
                    .for_each(|(a, b)| *a += b);
            }
            grads[0] = Some(gx);
        }
        OpKind::ConcatRows => {
            let mut offset = 0;
            for (i, t) in x.iter().enumerate() {
                let n = t.numel();
                if want(i) {
                    grads[i] = Some(g[offset..offset + n].to_vec());
                }
                offset += n;
            }
        }
        OpKind::Transpose => {
            grads[0] = Some(permute_values(g, &y.shape, &[1, 0]).1);
        }
        OpKind::Reshape(_) => grads[0] = Some(g.to_vec()),
        OpKind::Permute(axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            grads[0] = Some(permute_values(g, &y.shape, &inv).1);
        }
        OpKind::LayerNorm { eps } => {
            let (t, gain) = (x[0], x[1]);
            let n = gain.numel();
            let mut gx = vec![0.0; t.numel()];
            let mut gg = vec![0.0; n];
            let mut gbias = vec![0.0; n];
            let mut xhat = vec![0.0; n];
            let mut gxhat = vec![0.0; n];
            for ((row, gr), gxr) in t.values.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                let (mu, rstd) = layer_norm_stats(row, *eps);
                for j in 0..n {
                    xhat[j] = (row[j] - mu) * rstd;
                    gxhat[j] = gr[j] * gain.values[j];
                    gg[j] += gr[j] * xhat[j];
                    gbias[j] += gr[j];
                }
                let s1: f64 = gxhat.iter().sum();
                let s2: f64 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                let nf = n as f64;
                for j in 0..n {
                    gxr[j] = rstd / nf * (nf * gxhat[j] - s1 - xhat[j] * s2);
                }
            }
            if want(0) {
                grads[0] = Some(gx);
            }
            if want(1) {
                grads[1] = Some(gg);
            }
            if want(2) {
                grads[2] = Some(gbias);
            }
        }
    }
    for (i, slot) in grads.iter_mut().enumerate() {
        if !needs[i] {
            *slot = None;
        }
    }
    Ok(grads)
}
