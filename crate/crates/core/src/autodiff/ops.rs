//! Primitive operations: forward semantics and vector-Jacobian products.

use std::sync::Arc;

use super::tensor::{Scalar, Tensor};
use super::TensorError;

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A differentiable primitive.
///
/// Broadcasting is limited to leading-axis expansion: for `Add` and `Mul` one
/// operand's shape may be a suffix of the other's, in which case it is
/// repeated over the leading axes.
#[derive(Clone, Debug)]
pub enum Op<T> {
    /// Parameter or constant supplied by the caller.
    Leaf,
    /// `[m,k]·[k,n]`, `[s,m,k]·[k,n]` (shared rhs) or `[s,m,k]·[s,k,n]`.
    /// With `trans_b` the rhs is stored transposed (`[n,k]` / `[s,n,k]`).
    MatMul { trans_b: bool },
    Add,
    Mul,
    Relu,
    /// Softmax over the last axis. With `zero_slot` an extra logit of 0 is
    /// appended to every row; its probability is dropped from the output, so
    /// rows sum to the mass assigned to real slots.
    Softmax { zero_slot: bool },
    /// Normalise the last axis to zero mean and unit variance (no affine).
    LayerNorm,
    Sum,
    Mean,
    /// Elementwise `(a - b)²`.
    SquaredError,
    Scale(T),
    /// Concatenate along the last axis.
    Concat,
    /// Replace entries where `mask` is set by `value`. The mask covers the
    /// trailing axes and repeats over the leading ones.
    MaskFill { mask: Arc<[bool]>, value: T },
    Reshape(Vec<usize>),
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm => "layer_norm",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SquaredError => "squared_error",
            Op::Scale(_) => "scale",
            Op::Concat => "concat",
            Op::MaskFill { .. } => "mask_fill",
            Op::Reshape(_) => "reshape",
        }
    }
}

fn mismatch<T>(op: &Op<T>, inputs: &[&Tensor<T>]) -> TensorError
where
    T: Scalar,
{
    TensorError::ShapeMismatch {
        op: op.name(),
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn arity<T: Scalar>(op: &Op<T>, inputs: &[&Tensor<T>], n: usize) -> Result<(), TensorError> {
    if inputs.len() == n {
        Ok(())
    } else {
        Err(TensorError::Arity {
            op: op.name(),
            expected: n,
            got: inputs.len(),
        })
    }
}

fn check_inputs<T: Scalar>(op: &Op<T>, inputs: &[&Tensor<T>]) -> Result<(), TensorError> {
    let allow_neg_inf = matches!(op, Op::Softmax { .. });
    for (index, t) in inputs.iter().enumerate() {
        let ok = t.data().iter().all(|v| {
            v.is_finite() || (allow_neg_inf && v.is_infinite() && v.is_sign_negative())
        });
        if !ok {
            return Err(TensorError::NonFinite {
                op: op.name(),
                input: index,
            });
        }
    }
    Ok(())
}

/// How the smaller operand of a binary elementwise op repeats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Expand {
    Same,
    /// rhs repeats over the leading axes of lhs
    Rhs,
    /// lhs repeats over the leading axes of rhs
    Lhs,
}

fn expansion(a: &[usize], b: &[usize]) -> Option<Expand> {
    if a == b {
        Some(Expand::Same)
    } else if b.len() < a.len() && a.ends_with(b) {
        Some(Expand::Rhs)
    } else if a.len() < b.len() && b.ends_with(a) {
        Some(Expand::Lhs)
    } else {
        None
    }
}

struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    rhs_batched: bool,
    out_shape: Vec<usize>,
}

fn plan_matmul(a: &[usize], b: &[usize], trans_b: bool) -> Option<MatMulPlan> {
    let (bk, bn) = match b.len() {
        2 | 3 => {
            let r = &b[b.len() - 2..];
            if trans_b {
                (r[1], r[0])
            } else {
                (r[0], r[1])
            }
        }
        _ => return None,
    };
    match (a.len(), b.len()) {
        (2, 2) | (3, 2) => {
            let k = a[a.len() - 1];
            if k != bk {
                return None;
            }
            let m = a[..a.len() - 1].iter().product();
            let mut out_shape = a[..a.len() - 1].to_vec();
            out_shape.push(bn);
            Some(MatMulPlan {
                batch: 1,
                m,
                k,
                n: bn,
                rhs_batched: false,
                out_shape,
            })
        }
        (3, 3) => {
            if a[0] != b[0] || a[2] != bk {
                return None;
            }
            Some(MatMulPlan {
                batch: a[0],
                m: a[1],
                k: a[2],
                n: bn,
                rhs_batched: true,
                out_shape: vec![a[0], a[1], bn],
            })
        }
        _ => None,
    }
}

/// Evaluate one primitive on concrete inputs.
pub fn eval_primitive<T: Scalar>(op: &Op<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    check_inputs(op, inputs)?;
    match op {
        Op::Leaf => Err(TensorError::Arity {
            op: "leaf",
            expected: 0,
            got: inputs.len(),
        }),
        Op::MatMul { trans_b } => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let plan = plan_matmul(a.shape(), b.shape(), *trans_b).ok_or_else(|| mismatch(op, inputs))?;
            let mut out = Tensor::zeros(&plan.out_shape);
            let b_strides = if *trans_b {
                (1, plan.k as isize)
            } else {
                (plan.n as isize, 1)
            };
            for s in 0..plan.batch {
                let a_off = s * plan.m * plan.k;
                let b_off = if plan.rhs_batched { s * plan.k * plan.n } else { 0 };
                let c_off = s * plan.m * plan.n;
                T::gemm(
                    plan.m,
                    plan.k,
                    plan.n,
                    &a.data()[a_off..],
                    (plan.k as isize, 1),
                    &b.data()[b_off..],
                    b_strides,
                    T::zero(),
                    &mut out.data_mut()[c_off..],
                    (plan.n as isize, 1),
                );
            }
            Ok(out)
        }
        Op::Add | Op::Mul => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let mode = expansion(a.shape(), b.shape()).ok_or_else(|| mismatch(op, inputs))?;
            let f = |x: T, y: T| if matches!(op, Op::Add) { x + y } else { x * y };
            let (big, small, swap) = match mode {
                Expand::Same | Expand::Rhs => (a, b, false),
                Expand::Lhs => (b, a, true),
            };
            let inner = small.numel().max(1);
            let data = big
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = small.data()[i % inner];
                    if swap {
                        f(y, x)
                    } else {
                        f(x, y)
                    }
                })
                .collect();
            Tensor::new(big.shape().to_vec(), data)
        }
        Op::Relu => {
            arity(op, inputs, 1)?;
            Ok(inputs[0].map(|x| if x > T::zero() { x } else { T::zero() }))
        }
        Op::Softmax { zero_slot } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if x.rank() == 0 {
                return Err(mismatch(op, inputs));
            }
            let cols = x.last_dim();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(cols.max(1)) {
                softmax_row(row, *zero_slot);
            }
            Ok(out)
        }
        Op::LayerNorm => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if x.rank() == 0 {
                return Err(mismatch(op, inputs));
            }
            let cols = x.last_dim();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(cols.max(1)) {
                let (mean, inv_std) = row_stats(row);
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv_std;
                }
            }
            Ok(out)
        }
        Op::Sum => {
            arity(op, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().copied().sum()))
        }
        Op::Mean => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if x.numel() == 0 {
                return Err(mismatch(op, inputs));
            }
            let total: T = x.data().iter().copied().sum();
            Ok(Tensor::scalar(total / T::lit(x.numel() as f64)))
        }
        Op::SquaredError => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, inputs));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (x - y) * (x - y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Op::Scale(c) => {
            arity(op, inputs, 1)?;
            let c = *c;
            Ok(inputs[0].map(|x| c * x))
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(TensorError::Arity {
                    op: "concat",
                    expected: 1,
                    got: 0,
                });
            }
            let lead = &inputs[0].shape()[..inputs[0].rank().saturating_sub(1)];
            if inputs.iter().any(|t| t.rank() == 0 || &t.shape()[..t.rank() - 1] != lead) {
                return Err(mismatch(op, inputs));
            }
            let rows: usize = lead.iter().product();
            let widths: Vec<usize> = inputs.iter().map(|t| t.last_dim()).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (t, &w) in inputs.iter().zip(&widths) {
                    data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::new(shape, data)
        }
        Op::MaskFill { mask, value } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if mask.is_empty() || !x.numel().is_multiple_of(mask.len()) {
                return Err(mismatch(op, inputs));
            }
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| if mask[i % mask.len()] { *value } else { v })
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        Op::Reshape(shape) => {
            arity(op, inputs, 1)?;
            inputs[0].reshaped(shape).map_err(|_| mismatch(op, inputs))
        }
    }
}

fn softmax_row<T: Scalar>(row: &mut [T], zero_slot: bool) {
    // The appended zero logit takes part in the max shift like any other slot.
    let mut max = if zero_slot { T::zero() } else { T::neg_infinity() };
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut total = if zero_slot { (-max).exp() } else { T::zero() };
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn row_stats<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, (var + T::lit(LAYER_NORM_EPS)).sqrt().recip())
}

fn reduce_to_suffix<T: Scalar>(g: &[T], inner: usize, shape: &[usize]) -> Tensor<T> {
    let mut acc = vec![T::zero(); inner];
    for (i, &v) in g.iter().enumerate() {
        acc[i % inner] = acc[i % inner] + v;
    }
    Tensor::new(shape.to_vec(), acc).expect("suffix shape")
}

/// Vector-Jacobian product: gradients of each input given the output gradient.
///
/// Entries of `wanted` that are `false` are returned as `None` without being
/// computed.
pub(crate) fn vjp<T: Scalar>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    grad: &Tensor<T>,
    wanted: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
    let g = grad.data();
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul { trans_b } => {
            let (a, b) = (inputs[0], inputs[1]);
            let plan = plan_matmul(a.shape(), b.shape(), *trans_b).expect("validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut da = want(0).then(|| Tensor::zeros(a.shape()));
            let mut db = want(1).then(|| Tensor::zeros(b.shape()));
            for s in 0..plan.batch {
                let a_off = s * m * k;
                let b_off = if plan.rhs_batched { s * k * n } else { 0 };
                let g_off = s * m * n;
                let g_s = &g[g_off..];
                if let Some(da) = da.as_mut() {
                    // dA = G · Bᵀ
                    let bt_strides = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(
                        m,
                        n,
                        k,
                        g_s,
                        (n as isize, 1),
                        &b.data()[b_off..],
                        bt_strides,
                        T::zero(),
                        &mut da.data_mut()[a_off..],
                        (k as isize, 1),
                    );
                }
                if let Some(db) = db.as_mut() {
                    let beta = if plan.rhs_batched || s == 0 { T::zero() } else { T::one() };
                    if *trans_b {
                        // dBᵀ = Gᵀ · A   ([n,m]·[m,k])
                        T::gemm(
                            n,
                            m,
                            k,
                            g_s,
                            (1, n as isize),
                            &a.data()[a_off..],
                            (k as isize, 1),
                            beta,
                            &mut db.data_mut()[b_off..],
                            (k as isize, 1),
                        );
                    } else {
                        // dB = Aᵀ · G   ([k,m]·[m,n])
                        T::gemm(
                            k,
                            m,
                            n,
                            &a.data()[a_off..],
                            (1, k as isize),
                            g_s,
                            (n as isize, 1),
                            beta,
                            &mut db.data_mut()[b_off..],
                            (n as isize, 1),
                        );
                    }
                }
            }
            vec![da, db]
        }
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            let mode = expansion(a.shape(), b.shape()).expect("validated in forward");
            let full = |t: &Tensor<T>| Tensor::new(t.shape().to_vec(), g.to_vec()).expect("same shape");
            let da = want(0).then(|| match mode {
                Expand::Lhs => reduce_to_suffix(g, a.numel(), a.shape()),
                _ => full(a),
            });
            let db = want(1).then(|| match mode {
                Expand::Rhs => reduce_to_suffix(g, b.numel(), b.shape()),
                _ => full(b),
            });
            vec![da, db]
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let mode = expansion(a.shape(), b.shape()).expect("validated in forward");
            let out_len = g.len();
            let at = |t: &Tensor<T>, i: usize| t.data()[i % t.numel()];
            let grad_of = |this: &Tensor<T>, other: &Tensor<T>, reduce: bool| {
                let prod: Vec<T> = (0..out_len).map(|i| g[i] * at(other, i)).collect();
                if reduce {
                    reduce_to_suffix(&prod, this.numel(), this.shape())
                } else {
                    Tensor::new(this.shape().to_vec(), prod).expect("same shape")
                }
            };
            let da = want(0).then(|| grad_of(a, b, mode == Expand::Lhs));
            let db = want(1).then(|| grad_of(b, a, mode == Expand::Rhs));
            vec![da, db]
        }
        Op::Relu => {
            let x = inputs[0];
            let d = want(0).then(|| {
                let data = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                Tensor::new(x.shape().to_vec(), data).expect("same shape")
            });
            vec![d]
        }
        Op::Softmax { .. } => {
            let d = want(0).then(|| {
                let cols = output.last_dim().max(1);
                let mut data = vec![T::zero(); output.numel()];
                for ((dst, y), gr) in data
                    .chunks_mut(cols)
                    .zip(output.data().chunks(cols))
                    .zip(g.chunks(cols))
                {
                    // The zero slot's output is discarded, so its upstream gradient is 0.
                    let dot: T = y.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                    for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                Tensor::new(output.shape().to_vec(), data).expect("same shape")
            });
            vec![d]
        }
        Op::LayerNorm => {
            let x = inputs[0];
            let d = want(0).then(|| {
                let cols = x.last_dim().max(1);
                let nf = T::lit(cols as f64);
                let mut data = vec![T::zero(); x.numel()];
                for ((dst, xr), gr) in data.chunks_mut(cols).zip(x.data().chunks(cols)).zip(g.chunks(cols)) {
                    let (mean, inv_std) = row_stats(xr);
                    let g_mean = gr.iter().copied().sum::<T>() / nf;
                    let gy_mean = xr
                        .iter()
                        .zip(gr)
                        .map(|(&xv, &gv)| (xv - mean) * inv_std * gv)
                        .sum::<T>()
                        / nf;
                    for ((d, &xv), &gv) in dst.iter_mut().zip(xr).zip(gr) {
                        let y = (xv - mean) * inv_std;
                        *d = inv_std * (gv - g_mean - y * gy_mean);
                    }
                }
                Tensor::new(x.shape().to_vec(), data).expect("same shape")
            });
            vec![d]
        }
        Op::Sum => vec![want(0).then(|| Tensor::full(inputs[0].shape(), g[0]))],
        Op::Mean => {
            let n = T::lit(inputs[0].numel() as f64);
            vec![want(0).then(|| Tensor::full(inputs[0].shape(), g[0] / n))]
        }
        Op::SquaredError => {
            let (a, b) = (inputs[0], inputs[1]);
            let two = T::lit(2.0);
            let diff: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| two * (x - y)).collect();
            let da = want(0).then(|| {
                let d = diff.iter().zip(g).map(|(&df, &gv)| df * gv).collect();
                Tensor::new(a.shape().to_vec(), d).expect("same shape")
            });
            let db = want(1).then(|| {
                let d = diff.iter().zip(g).map(|(&df, &gv)| -df * gv).collect();
                Tensor::new(b.shape().to_vec(), d).expect("same shape")
            });
            vec![da, db]
        }
        Op::Scale(c) => vec![want(0).then(|| grad.map(|v| *c * v))],
        Op::Concat => {
            let rows = grad.numel() / grad.last_dim().max(1);
            let total = grad.last_dim();
            let mut offset = 0;
            inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let w = t.last_dim();
                    let start = offset;
                    offset += w;
                    want(i).then(|| {
                        let mut data = Vec::with_capacity(t.numel());
                        for r in 0..rows {
                            data.extend_from_slice(&g[r * total + start..r * total + start + w]);
                        }
                        Tensor::new(t.shape().to_vec(), data).expect("same shape")
                    })
                })
                .collect()
        }
        Op::MaskFill { mask, .. } => {
            let d = want(0).then(|| {
                let data = g
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if mask[i % mask.len()] { T::zero() } else { v })
                    .collect();
                Tensor::new(grad.shape().to_vec(), data).expect("same shape")
            });
            vec![d]
        }
        Op::Reshape(_) => vec![want(0).then(|| grad.reshaped(inputs[0].shape()).expect("same numel"))],
    }
}
