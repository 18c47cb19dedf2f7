//! Forward and backward kernels for the op catalog.

use super::gemm::{gemm, gemm_strided, MatRef, Strided};
use super::{Tensor, TensorError};

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Probability clamp applied before the logarithms in [`Op::BceMean`].
pub const BCE_CLAMP: f32 = 1e-7;

/// Operation kinds recorded in a [`Graph`](super::Graph).
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Parameter or constant.
    Leaf,
    /// Rank-2 product with optional logical transposes of either operand.
    MatMul { trans_a: bool, trans_b: bool },
    /// Elementwise sum. The second operand may also be a rank-1 vector
    /// matching the first operand's last extent (bias add).
    Add,
    /// Elementwise product of equal shapes.
    Mul,
    Relu,
    Sigmoid,
    SoftmaxLastDim,
    /// Inputs: `x`, `gamma`, `beta`; the affine parameters have the
    /// extent of `x`'s last axis.
    LayerNormLastDim,
    /// Inputs: `x [cin, h, w]`, `kernel [cout, cin, kh, kw]`, `bias [cout]`.
    Conv2dValid,
    /// Like [`Op::Conv2dValid`] along the height axis, zero-padded along
    /// the width axis so the output width equals the input width.
    Conv2dSameTime,
    /// Non-overlapping max pool over `[c, h, w]`, stride equal to the window.
    MaxPool2d { kh: usize, kw: usize },
    /// Mean over one axis, keeping that axis with extent 1.
    MeanAxis { axis: usize },
    ConcatAxis { axis: usize },
    Scale { factor: f32 },
    SliceAxis { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    Transpose2d,
    SumAll,
    /// Inputs: predicted probabilities and targets of the same shape;
    /// output is the mean binary cross-entropy as a one-element tensor.
    BceMean,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::SoftmaxLastDim => "softmax_lastdim",
            Op::LayerNormLastDim => "layer_norm_lastdim",
            Op::Conv2dValid => "conv2d_valid",
            Op::Conv2dSameTime => "conv2d_same_time",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::MeanAxis { .. } => "mean_axis",
            Op::ConcatAxis { .. } => "concat_axis",
            Op::Scale { .. } => "scale",
            Op::SliceAxis { .. } => "slice_axis",
            Op::Reshape { .. } => "reshape",
            Op::Transpose2d => "transpose2d",
            Op::SumAll => "sum_all",
            Op::BceMean => "bce_mean",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::ConcatAxis { .. } => None,
            Op::MatMul { .. } | Op::Add | Op::Mul | Op::BceMean => Some(2),
            Op::LayerNormLastDim | Op::Conv2dValid | Op::Conv2dSameTime => Some(3),
            _ => Some(1),
        }
    }
}

fn shape_err(op: &Op, shapes: &[&[usize]], what: &str) -> TensorError {
    TensorError::Shape(format!("{}: {what}; input shapes {shapes:?}", op.name()))
}

/// Evaluates one op on concrete inputs.
pub fn forward_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    match op.arity() {
        Some(n) if n != inputs.len() => {
            return Err(shape_err(op, &shapes, &format!("expected {n} inputs")))
        }
        None if inputs.is_empty() => return Err(shape_err(op, &shapes, "needs inputs")),
        _ => {}
    }
    let err = |what: &str| shape_err(op, &shapes, what);
    match op {
        Op::Leaf => Err(err("leaves have no forward")),
        Op::MatMul { trans_a, trans_b } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (ar, ac) = a.dims2().map_err(|_| err("operands must be matrices"))?;
            let (br, bc) = b.dims2().map_err(|_| err("operands must be matrices"))?;
            let (m, k) = if *trans_a { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if *trans_b { (bc, br) } else { (br, bc) };
            if k != k2 {
                return Err(err("inner dimensions differ"));
            }
            let mut out = vec![0.0; m * n];
            let ma = MatRef::new(a.data(), ar, ac);
            let mb = MatRef::new(b.data(), br, bc);
            gemm(
                1.0,
                if *trans_a { ma.t() } else { ma },
                if *trans_b { mb.t() } else { mb },
                0.0,
                &mut out,
            );
            Tensor::new(vec![m, n], out)
        }
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::new(a.shape().to_vec(), data)
            } else if b.rank() == 1 && a.shape().last() == Some(&b.len()) {
                let d = b.len();
                let mut data = a.data().to_vec();
                for row in data.chunks_mut(d) {
                    for (x, y) in row.iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                Tensor::new(a.shape().to_vec(), data)
            } else {
                Err(err("shapes must match or the second must be a last-axis vector"))
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(err("shapes must match"));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        // NaN propagates so that numeric failures surface in the loss.
        Op::Relu => map(inputs[0], |x| if x < 0.0 { 0.0 } else { x }),
        Op::Sigmoid => map(inputs[0], sigmoid),
        Op::Scale { factor } => map(inputs[0], |x| x * factor),
        Op::SoftmaxLastDim => {
            let x = inputs[0];
            let d = *x.shape().last().unwrap();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(d) {
                softmax_in_place(row);
            }
            Tensor::new(x.shape().to_vec(), data)
        }
        Op::LayerNormLastDim => {
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let d = *x.shape().last().unwrap();
            if gamma.shape() != [d] || beta.shape() != [d] {
                return Err(err("gamma and beta must be vectors over the last axis"));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(d) {
                let (mean, inv_std) = row_stats(row);
                for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
                    *v = (*v - mean) * inv_std * g + b;
                }
            }
            Tensor::new(x.shape().to_vec(), data)
        }
        Op::Conv2dValid | Op::Conv2dSameTime => {
            let geom = ConvGeom::new(op, inputs[0], inputs[1], inputs[2]).ok_or_else(|| {
                err("expected x [cin,h,w], kernel [cout,cin,kh,kw], bias [cout] with kernel inside x")
            })?;
            Ok(conv_forward(&geom, inputs[0], inputs[1], inputs[2]))
        }
        Op::MaxPool2d { kh, kw } => {
            let x = inputs[0];
            let [c, h, w] = x.shape()[..] else {
                return Err(err("expected [c,h,w]"));
            };
            if *kh == 0 || *kw == 0 || *kh > h || *kw > w {
                return Err(err("pool window must fit inside the input"));
            }
            let (oh, ow) = (h / kh, w / kw);
            let out = pool_argmax(x.data(), (c, h, w), *kh, *kw).into_iter().map(|i| x.data()[i]).collect();
            Tensor::new(vec![c, oh, ow], out)
        }
        Op::MeanAxis { axis } => {
            let x = inputs[0];
            if *axis >= x.rank() {
                return Err(err("axis out of range"));
            }
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let mut out = vec![0.0f32; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut acc = 0.0f64;
                    for a in 0..n {
                        acc += x.data()[(o * n + a) * inner + i] as f64;
                    }
                    out[o * inner + i] = (acc / n as f64) as f32;
                }
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = 1;
            Tensor::new(shape, out)
        }
        Op::ConcatAxis { axis } => {
            let first = inputs[0];
            if *axis >= first.rank() {
                return Err(err("axis out of range"));
            }
            for t in &inputs[1..] {
                let ok = t.rank() == first.rank()
                    && t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(i, (a, b))| i == *axis || a == b);
                if !ok {
                    return Err(err("extents must agree off the concat axis"));
                }
            }
            let (outer, _, inner) = split_axis(first.shape(), *axis);
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let n = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Tensor::new(shape, out)
        }
        Op::SliceAxis { axis, start, len } => {
            let x = inputs[0];
            if *axis >= x.rank() || *len == 0 || start + len > x.shape()[*axis] {
                return Err(err("slice out of range"));
            }
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            Tensor::new(shape, out)
        }
        Op::Reshape { shape } => inputs[0]
            .clone()
            .reshaped(shape)
            .map_err(|_| err(&format!("cannot reshape into {shape:?}"))),
        Op::Transpose2d => inputs[0]
            .transposed2()
            .map_err(|_| err("expected a matrix")),
        Op::SumAll => Ok(Tensor::scalar(inputs[0].sum())),
        Op::BceMean => {
            let (p, y) = (inputs[0], inputs[1]);
            if p.shape() != y.shape() {
                return Err(err("predictions and targets must have equal shapes"));
            }
            let mut acc = 0.0f64;
            for (&pv, &yv) in p.data().iter().zip(y.data()) {
                let pc = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP) as f64;
                let yv = yv as f64;
                acc -= yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln();
            }
            Ok(Tensor::scalar((acc / p.len() as f64) as f32))
        }
    }
}

/// Gradients of one op with respect to each input; `None` where the
/// input does not need a gradient.
pub(crate) fn backward_op(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let mut res: Vec<Option<Tensor>> = vec![None; inputs.len()];
    match op {
        Op::Leaf => {}
        Op::MatMul { trans_a, trans_b } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (ar, ac) = (a.shape()[0], a.shape()[1]);
            let (br, bc) = (b.shape()[0], b.shape()[1]);
            let (gm, gn) = (grad.shape()[0], grad.shape()[1]);
            let sa = MatRef::new(a.data(), ar, ac);
            let sb = MatRef::new(b.data(), br, bc);
            let g = MatRef::new(grad.data(), gm, gn);
            let op_a = if *trans_a { sa.t() } else { sa };
            let op_b = if *trans_b { sb.t() } else { sb };
            if needs[0] {
                let mut da = vec![0.0; ar * ac];
                if *trans_a {
                    gemm(1.0, op_b, g.t(), 0.0, &mut da);
                } else {
                    gemm(1.0, g, op_b.t(), 0.0, &mut da);
                }
                res[0] = Some(Tensor::new(vec![ar, ac], da).unwrap());
            }
            if needs[1] {
                let mut db = vec![0.0; br * bc];
                if *trans_b {
                    gemm(1.0, g.t(), op_a, 0.0, &mut db);
                } else {
                    gemm(1.0, op_a.t(), g, 0.0, &mut db);
                }
                res[1] = Some(Tensor::new(vec![br, bc], db).unwrap());
            }
        }
        Op::Add => {
            if needs[0] {
                res[0] = Some(grad.clone());
            }
            if needs[1] {
                let b = inputs[1];
                if b.shape() == grad.shape() {
                    res[1] = Some(grad.clone());
                } else {
                    let d = b.len();
                    let mut acc = vec![0.0f32; d];
                    for row in grad.data().chunks(d) {
                        for (s, v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    res[1] = Some(Tensor::new(vec![d], acc).unwrap());
                }
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if needs[0] {
                res[0] = Some(zip_map(grad, b, |g, y| g * y));
            }
            if needs[1] {
                res[1] = Some(zip_map(grad, a, |g, x| g * x));
            }
        }
        Op::Relu => {
            res[0] = Some(zip_map(grad, inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }));
        }
        Op::Sigmoid => {
            res[0] = Some(zip_map(grad, output, |g, y| g * y * (1.0 - y)));
        }
        Op::Scale { factor } => {
            res[0] = Some(map(grad, |g| g * factor).unwrap());
        }
        Op::SoftmaxLastDim => {
            let d = *output.shape().last().unwrap();
            let mut dx = vec![0.0f32; output.len()];
            for ((dxr, yr), gr) in dx
                .chunks_mut(d)
                .zip(output.data().chunks(d))
                .zip(grad.data().chunks(d))
            {
                let dot = lane_dot(yr, gr);
                for ((o, y), g) in dxr.iter_mut().zip(yr).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            res[0] = Some(Tensor::new(output.shape().to_vec(), dx).unwrap());
        }
        Op::LayerNormLastDim => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let d = *x.shape().last().unwrap();
            let mut dx = vec![0.0f32; x.len()];
            let mut dgamma = vec![0.0f32; d];
            let mut dbeta = vec![0.0f32; d];
            let mut xhat = vec![0.0f32; d];
            let mut dxhat = vec![0.0f32; d];
            for ((xr, gr), dxr) in x
                .data()
                .chunks(d)
                .zip(grad.data().chunks(d))
                .zip(dx.chunks_mut(d))
            {
                let (mean, inv_std) = row_stats(xr);
                for j in 0..d {
                    xhat[j] = (xr[j] - mean) * inv_std;
                    dxhat[j] = gr[j] * gamma.data()[j];
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                }
                let m1 = dxhat.iter().sum::<f32>() / d as f32;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                for j in 0..d {
                    dxr[j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            if needs[0] {
                res[0] = Some(Tensor::new(x.shape().to_vec(), dx).unwrap());
            }
            if needs[1] {
                res[1] = Some(Tensor::new(vec![d], dgamma).unwrap());
            }
            if needs[2] {
                res[2] = Some(Tensor::new(vec![d], dbeta).unwrap());
            }
        }
        Op::Conv2dValid | Op::Conv2dSameTime => {
            let geom = ConvGeom::new(op, inputs[0], inputs[1], inputs[2])
                .expect("shapes were validated in forward");
            let (dx, dk, db) = conv_backward(&geom, inputs[0], inputs[1], grad, needs);
            res[0] = dx;
            res[1] = dk;
            res[2] = db;
        }
        Op::MaxPool2d { kh, kw } => {
            let x = inputs[0];
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut dx = vec![0.0f32; x.len()];
            for (idx, g) in pool_argmax(x.data(), (c, h, w), *kh, *kw).into_iter().zip(grad.data()) {
                dx[idx] += g;
            }
            res[0] = Some(Tensor::new(x.shape().to_vec(), dx).unwrap());
        }
        Op::MeanAxis { axis } => {
            let x = inputs[0];
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let inv = 1.0 / n as f32;
            let mut dx = vec![0.0f32; x.len()];
            for o in 0..outer {
                for a in 0..n {
                    for i in 0..inner {
                        dx[(o * n + a) * inner + i] = grad.data()[o * inner + i] * inv;
                    }
                }
            }
            res[0] = Some(Tensor::new(x.shape().to_vec(), dx).unwrap());
        }
        Op::ConcatAxis { axis } => {
            let mut start = 0;
            for (i, t) in inputs.iter().enumerate() {
                let len = t.shape()[*axis];
                if needs[i] {
                    let slice = Op::SliceAxis {
                        axis: *axis,
                        start,
                        len,
                    };
                    res[i] = Some(forward_op(&slice, &[grad]).unwrap());
                }
                start += len;
            }
        }
        Op::SliceAxis { axis, start, len } => {
            let x = inputs[0];
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let mut dx = vec![0.0f32; x.len()];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                dx[base..base + len * inner]
                    .copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
            }
            res[0] = Some(Tensor::new(x.shape().to_vec(), dx).unwrap());
        }
        Op::Reshape { .. } => {
            res[0] = Some(grad.clone().reshaped(inputs[0].shape()).unwrap());
        }
        Op::Transpose2d => {
            res[0] = Some(grad.transposed2().unwrap());
        }
        Op::SumAll => {
            res[0] = Some(Tensor::full(inputs[0].shape(), grad.data()[0]));
        }
        Op::BceMean => {
            let (p, y) = (inputs[0], inputs[1]);
            let scale = grad.data()[0] / p.len() as f32;
            if needs[0] {
                // Gradient is evaluated at the clamped probability so that
                // saturated outputs still receive a signal.
                res[0] = Some(zip_map(p, y, |pv, yv| {
                    let pc = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    scale * (pc - yv) / (pc * (1.0 - pc))
                }));
            }
            if needs[1] {
                res[1] = Some(map(p, |pv| {
                    let pc = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    -scale * (pc / (1.0 - pc)).ln()
                }).unwrap());
            }
        }
    }
    res
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `e^x` for `f32`, accurate to a couple of ulp, written without branches
/// or libm calls so the softmax loop vectorizes.
#[inline(always)]
pub(crate) fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding 1.5 * 2^23 rounds to the nearest integer in the low mantissa bits.
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.336_54, 88.376_26);
    let t = x * LOG2E + ROUND;
    let n = t - ROUND;
    let ni = t.to_bits() as i32 - ROUND.to_bits() as i32;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((ni + 127) << 23) as u32)
}

/// Sum with eight independent accumulators so the loop vectorizes; the
/// association order is fixed, so results are deterministic.
pub(crate) fn lane_sum(xs: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] += c[i];
        }
    }
    let mut total = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &v in tail {
        total += v;
    }
    total
}

fn lane_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut total = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ta.iter().zip(tb) {
        total += x * y;
    }
    total
}

fn lane_max(xs: &[f32]) -> f32 {
    let mut acc = [f32::NEG_INFINITY; 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] = if c[i] > acc[i] { c[i] } else { acc[i] };
        }
    }
    acc.iter().chain(tail).copied().fold(f32::NEG_INFINITY, |m, v| if v > m { v } else { m })
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = lane_max(row);
    for v in row.iter_mut() {
        *v = exp_f32(*v - max);
    }
    let sum = lane_sum(row);
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Mean and reciprocal standard deviation of one row.
fn row_stats(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Result<Tensor, TensorError> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// `(outer, extent, inner)` element counts around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Flat index of the first row-major maximum inside every pool window, in
/// output order. Rows of the input are walked contiguously; each window still
/// visits its elements in row-major order.
fn pool_argmax(x: &[f32], (c, h, w): (usize, usize, usize), kh: usize, kw: usize) -> Vec<usize> {
    let (oh, ow) = (h / kh, w / kw);
    let mut best = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            let top = (ci * h + oy * kh) * w;
            let start = best.len();
            best.extend((0..ow).map(|ox| top + ox * kw));
            let row_best = &mut best[start..];
            for dy in 0..kh {
                let row = top + dy * w;
                for (ox, b) in row_best.iter_mut().enumerate() {
                    for dx in 0..kw {
                        let idx = row + ox * kw + dx;
                        // A NaN wins so that it propagates; among numbers, the
                        // first maximum in row-major order wins.
                        if x[idx] > x[*b] || (x[idx].is_nan() && !x[*b].is_nan()) {
                            *b = idx;
                        }
                    }
                }
            }
        }
    }
    best
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(op: &Op, x: &Tensor, k: &Tensor, b: &Tensor) -> Option<Self> {
        let [cin, h, w] = x.shape()[..] else {
            return None;
        };
        let [cout, kcin, kh, kw] = k.shape()[..] else {
            return None;
        };
        if kcin != cin || b.shape() != [cout] || kh > h {
            return None;
        }
        let (pad_left, ow) = match op {
            Op::Conv2dValid => {
                if kw > w {
                    return None;
                }
                (0, w - kw + 1)
            }
            _ => ((kw - 1) / 2, w),
        };
        Some(Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            pad_left,
            oh: h - kh + 1,
            ow,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Range of output columns `ox` whose source column `ox + dx - pad_left`
    /// lies inside the input, plus the source offset.
    fn valid_cols(&self, dx: usize) -> (usize, usize, isize) {
        let shift = dx as isize - self.pad_left as isize;
        let lo = (-shift).max(0) as usize;
        let hi = ((self.w as isize - shift).min(self.ow as isize)).max(lo as isize) as usize;
        (lo, hi, shift)
    }
}

/// Unfolds the input into a `[cin*kh*kw, oh*ow]` patch matrix.
fn im2col(g: &ConvGeom, x: &[f32]) -> Vec<f32> {
    let npos = g.positions();
    let mut cols = vec![0.0f32; g.patch() * npos];
    for ci in 0..g.cin {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let r = (ci * g.kh + dy) * g.kw + dx;
                let (lo, hi, shift) = g.valid_cols(dx);
                for oy in 0..g.oh {
                    let src = (ci * g.h + oy + dy) * g.w;
                    let dst = r * npos + oy * g.ow;
                    let s0 = (src as isize + lo as isize + shift) as usize;
                    cols[dst + lo..dst + hi].copy_from_slice(&x[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
    cols
}

fn col2im(g: &ConvGeom, cols: &[f32]) -> Vec<f32> {
    let npos = g.positions();
    let mut x = vec![0.0f32; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let r = (ci * g.kh + dy) * g.kw + dx;
                let (lo, hi, shift) = g.valid_cols(dx);
                for oy in 0..g.oh {
                    let src = r * npos + oy * g.ow;
                    let dst = (ci * g.h + oy + dy) * g.w;
                    let d0 = (dst as isize + lo as isize + shift) as usize;
                    for (o, v) in x[d0..d0 + (hi - lo)].iter_mut().zip(&cols[src + lo..src + hi]) {
                        *o += v;
                    }
                }
            }
        }
    }
    x
}

/// Tall kernels are evaluated as one GEMM per (input channel, kernel
/// column, output row) directly over a width-padded copy of the input,
/// which avoids materialising the large patch matrix. Single-row kernels
/// use the patch matrix, which is small for them.
fn use_shifted(g: &ConvGeom) -> bool {
    g.kh > 1
}

impl ConvGeom {
    /// Width of the zero-padded input used by the shifted path.
    fn padded_w(&self) -> usize {
        self.ow + self.kw - 1
    }

    fn pad(&self, x: &[f32]) -> Vec<f32> {
        let wp = self.padded_w();
        let mut xp = vec![0.0f32; self.cin * self.h * wp];
        for (src, dst) in x.chunks(self.w).zip(xp.chunks_mut(wp)) {
            let n = self.w.min(wp - self.pad_left);
            dst[self.pad_left..self.pad_left + n].copy_from_slice(&src[..n]);
        }
        xp
    }

    fn unpad(&self, xp: &[f32]) -> Vec<f32> {
        let wp = self.padded_w();
        let mut x = vec![0.0f32; self.cin * self.h * self.w];
        for (dst, src) in x.chunks_mut(self.w).zip(xp.chunks(wp)) {
            let n = self.w.min(wp - self.pad_left);
            dst[..n].copy_from_slice(&src[self.pad_left..self.pad_left + n]);
        }
        x
    }

    /// Kernel slice `[cout, kh]` for input channel `ci` and column `dx`.
    fn kernel_view(&self, ci: usize, dx: usize) -> Strided {
        Strided {
            offset: ci * self.kh * self.kw + dx,
            rows: self.cout,
            cols: self.kh,
            rs: self.patch(),
            cs: self.kw,
        }
    }

    /// Padded-input window `[kh, ow]` starting at row `oy`, column `dx`.
    fn input_view(&self, ci: usize, dx: usize, oy: usize) -> Strided {
        let wp = self.padded_w();
        Strided {
            offset: (ci * self.h + oy) * wp + dx,
            rows: self.kh,
            cols: self.ow,
            rs: wp,
            cs: 1,
        }
    }

    /// Output row `oy` across all channels, `[cout, ow]`.
    fn output_view(&self, oy: usize) -> Strided {
        Strided {
            offset: oy * self.ow,
            rows: self.cout,
            cols: self.ow,
            rs: self.positions(),
            cs: 1,
        }
    }
}

fn transpose_view(v: Strided) -> Strided {
    Strided {
        rows: v.cols,
        cols: v.rows,
        rs: v.cs,
        cs: v.rs,
        ..v
    }
}

fn conv_forward(g: &ConvGeom, x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let npos = g.positions();
    let mut out = vec![0.0f32; g.cout * npos];
    for (row, &bias) in out.chunks_mut(npos).zip(b.data()) {
        row.fill(bias);
    }
    if use_shifted(g) {
        let xp = g.pad(x.data());
        for ci in 0..g.cin {
            for dx in 0..g.kw {
                for oy in 0..g.oh {
                    gemm_strided(
                        1.0,
                        k.data(),
                        g.kernel_view(ci, dx),
                        &xp,
                        g.input_view(ci, dx, oy),
                        1.0,
                        &mut out,
                        g.output_view(oy),
                    );
                }
            }
        }
    } else {
        let cols = im2col(g, x.data());
        gemm(
            1.0,
            MatRef::new(k.data(), g.cout, g.patch()),
            MatRef::new(&cols, g.patch(), npos),
            1.0,
            &mut out,
        );
    }
    Tensor::new(vec![g.cout, g.oh, g.ow], out).unwrap()
}

type ConvGrads = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

fn conv_backward(g: &ConvGeom, x: &Tensor, k: &Tensor, grad: &Tensor, needs: &[bool]) -> ConvGrads {
    let npos = g.positions();
    let (dx, dk) = if use_shifted(g) {
        let xp = g.pad(x.data());
        let dx = needs[0].then(|| {
            let mut dxp = vec![0.0f32; xp.len()];
            for ci in 0..g.cin {
                for dx in 0..g.kw {
                    for oy in 0..g.oh {
                        gemm_strided(
                            1.0,
                            k.data(),
                            transpose_view(g.kernel_view(ci, dx)),
                            grad.data(),
                            g.output_view(oy),
                            1.0,
                            &mut dxp,
                            g.input_view(ci, dx, oy),
                        );
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), g.unpad(&dxp)).unwrap()
        });
        let dk = needs[1].then(|| {
            let mut dk = vec![0.0f32; g.cout * g.patch()];
            for ci in 0..g.cin {
                for dx in 0..g.kw {
                    for oy in 0..g.oh {
                        gemm_strided(
                            1.0,
                            grad.data(),
                            g.output_view(oy),
                            &xp,
                            transpose_view(g.input_view(ci, dx, oy)),
                            1.0,
                            &mut dk,
                            g.kernel_view(ci, dx),
                        );
                    }
                }
            }
            Tensor::new(k.shape().to_vec(), dk).unwrap()
        });
        (dx, dk)
    } else {
        let gm = MatRef::new(grad.data(), g.cout, npos);
        let dx = needs[0].then(|| {
            let mut dcols = vec![0.0f32; g.patch() * npos];
            gemm(1.0, MatRef::new(k.data(), g.cout, g.patch()).t(), gm, 0.0, &mut dcols);
            Tensor::new(x.shape().to_vec(), col2im(g, &dcols)).unwrap()
        });
        let dk = needs[1].then(|| {
            let cols = im2col(g, x.data());
            let mut dk = vec![0.0f32; g.cout * g.patch()];
            gemm(1.0, gm, MatRef::new(&cols, g.patch(), npos).t(), 0.0, &mut dk);
            Tensor::new(k.shape().to_vec(), dk).unwrap()
        });
        (dx, dk)
    };
    let db = needs[2].then(|| {
        let sums = grad.data().chunks(npos).map(|r| r.iter().sum()).collect();
        Tensor::new(vec![g.cout], sums).unwrap()
    });
    (dx, dk, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn fast_exp_tracks_libm() {
        let mut x = -90.0f32;
        while x < 88.0 {
            let want = (x as f64).exp();
            let got = exp_f32(x) as f64;
            if want > 1e-37 {
                assert!(((got - want) / want).abs() < 4e-7, "x={x} got={got} want={want}");
            }
            x += 0.0137;
        }
        assert_eq!(exp_f32(0.0), 1.0);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = forward_op(&Op::SoftmaxLastDim, &[&t(&[4], &[0.0; 4])]).unwrap();
        assert_eq!(y.data(), &[0.25; 4]);
    }

    #[test]
    fn relu_clips_negatives() {
        let y = forward_op(&Op::Relu, &[&t(&[2], &[-1.0, 2.0])]).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn valid_conv_of_ones() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = forward_op(&Op::Conv2dValid, &[&x, &k, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    /// Direct-loop convolution and its gradients, used as an oracle.
    fn naive_conv(
        x: &Tensor,
        k: &Tensor,
        b: &Tensor,
        pad: usize,
        ow: usize,
        gout: &[f32],
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let [cin, h, w] = x.shape()[..] else { unreachable!() };
        let [cout, _, kh, kw] = k.shape()[..] else { unreachable!() };
        let oh = h - kh + 1;
        let mut y = vec![0.0f64; cout * oh * ow];
        let mut dx = vec![0.0f64; x.len()];
        let mut dk = vec![0.0f64; k.len()];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (co * oh + oy) * ow + ox;
                    y[o] += b.data()[co] as f64;
                    for ci in 0..cin {
                        for dy in 0..kh {
                            for ddx in 0..kw {
                                let sx = ox as isize + ddx as isize - pad as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let xi = (ci * h + oy + dy) * w + sx as usize;
                                let ki = ((co * cin + ci) * kh + dy) * kw + ddx;
                                y[o] += (x.data()[xi] * k.data()[ki]) as f64;
                                dx[xi] += (gout[o] * k.data()[ki]) as f64;
                                dk[ki] += (gout[o] * x.data()[xi]) as f64;
                            }
                        }
                    }
                }
            }
        }
        let f = |v: Vec<f64>| v.into_iter().map(|v| v as f32).collect();
        (f(y), f(dx), f(dk))
    }

    #[test]
    fn both_conv_strategies_match_direct_loops() {
        let fill = |shape: &[usize], seed: usize| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| (((i * 37 + seed * 11) % 23) as f32 - 11.0) / 7.0).collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        // (cin, h, w, cout, kh, kw): tall kernels and single-row kernels.
        for (cin, h, w, cout, kh, kw) in [(2, 6, 7, 3, 4, 3), (1, 5, 9, 2, 5, 4), (2, 1, 8, 3, 1, 5), (1, 3, 6, 2, 1, 2)] {
            let x = fill(&[cin, h, w], 1);
            let k = fill(&[cout, cin, kh, kw], 2);
            let b = fill(&[cout], 3);
            for op in [Op::Conv2dValid, Op::Conv2dSameTime] {
                let g = ConvGeom::new(&op, &x, &k, &b).unwrap();
                let gout = fill(&[cout, g.oh, g.ow], 4);
                let (y, dx, dk) = naive_conv(&x, &k, &b, g.pad_left, g.ow, gout.data());
                let got = conv_forward(&g, &x, &k, &b);
                let (gdx, gdk, _) = conv_backward(&g, &x, &k, &gout, &[true, true, false]);
                let close = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(a, b)| (a - b).abs() < 1e-4);
                assert!(close(got.data(), &y), "{op:?} forward kh={kh}");
                assert!(close(gdx.unwrap().data(), &dx), "{op:?} dx kh={kh}");
                assert!(close(gdk.unwrap().data(), &dk), "{op:?} dk kh={kh}");
            }
        }
    }

    #[test]
    fn same_time_conv_pads_only_width() {
        // 1x1x4 input, 1x3 kernel of ones: zero padding one column each side.
        let x = t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::full(&[1, 1, 1, 3], 1.0);
        let b = t(&[1], &[0.5]);
        let y = forward_op(&Op::Conv2dSameTime, &[&x, &k, &b]).unwrap();
        assert_eq!(y.data(), &[3.5, 6.5, 9.5, 7.5]);
    }

    #[test]
    fn maxpool_ties_route_to_first_element() {
        let x = t(&[1, 2, 2], &[3.0, 3.0, 1.0, 3.0]);
        let op = Op::MaxPool2d { kh: 2, kw: 2 };
        let y = forward_op(&op, &[&x]).unwrap();
        assert_eq!(y.data(), &[3.0]);
        let g = backward_op(&op, &[&x], &y, &t(&[1, 1, 1], &[1.0]), &[true]);
        assert_eq!(g[0].as_ref().unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let x = t(&[3], &[0.0, 1.0, -1.0]);
        let y = forward_op(&Op::Relu, &[&x]).unwrap();
        let g = backward_op(&Op::Relu, &[&x], &y, &Tensor::full(&[3], 1.0), &[true]);
        assert_eq!(g[0].as_ref().unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        let e = forward_op(&Op::MatMul { trans_a: false, trans_b: false }, &[&a, &b]).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let c = forward_op(&Op::ConcatAxis { axis: 1 }, &[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = forward_op(&Op::SliceAxis { axis: 1, start: 2, len: 1 }, &[&c]).unwrap();
        assert_eq!(s, b);
    }

    #[test]
    fn mean_axis_keeps_extent_one() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        let m0 = forward_op(&Op::MeanAxis { axis: 0 }, &[&x]).unwrap();
        assert_eq!(m0.shape(), &[1, 3]);
        assert_eq!(m0.data(), &[3.0, 4.0, 5.0]);
        let m1 = forward_op(&Op::MeanAxis { axis: 1 }, &[&x]).unwrap();
        assert_eq!(m1.data(), &[2.0, 6.0]);
    }

    #[test]
    fn bce_hand_values() {
        let p = t(&[2], &[0.9, 0.1]);
        let y = t(&[2], &[1.0, 0.0]);
        let l = forward_op(&Op::BceMean, &[&p, &y]).unwrap();
        assert!((l.data()[0] - 0.105_360_5).abs() < 1e-6);
    }
}
