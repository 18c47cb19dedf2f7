//! Central-difference verification of [`Graph::backward`].

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor, TensorError};

/// Fraction of each parameter's coordinates probed by [`grad_check`].
pub const GRAD_CHECK_FRACTION: f64 = 0.05;

/// Worst relative disagreement between analytic gradients and central
/// differences over a seeded sample of coordinates.
///
/// Each parameter contributes `ceil(5%)` of its coordinates (at least one).
/// The relative error of one coordinate is
/// `|a - n| / max(1e-6, |a| + |n|)`. The graph is restored to its original
/// parameter values before returning.
pub fn grad_check(graph: &mut Graph, loss: NodeId, eps: f32, seed: u64) -> Result<f32, TensorError> {
    let analytic = graph.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    let names: Vec<String> = graph.param_names().map(str::to_owned).collect();
    for name in &names {
        let id = graph.param_id(name).expect("listed parameter");
        let original = graph.value(id).clone();
        if !original.is_finite() {
            return Err(TensorError::Contract(format!("parameter {name} is not finite")));
        }
        let n = original.len();
        let k = ((n as f64 * GRAD_CHECK_FRACTION).ceil() as usize).clamp(1, n);
        for idx in sample(&mut rng, n, k) {
            let eval = |graph: &mut Graph, delta: f32| -> Result<f64, TensorError> {
                let mut p = original.clone();
                p.data_mut()[idx] += delta;
                graph.set_param(name, p)?;
                graph.recompute()?;
                Ok(graph.value(loss).data()[0] as f64)
            };
            let plus = eval(graph, eps)?;
            let minus = eval(graph, -eps)?;
            let numeric = ((plus - minus) / (2.0 * eps as f64)) as f32;
            let a = analytic[name].data()[idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        graph.set_param(name, original)?;
    }
    graph.recompute()?;
    Ok(worst)
}

/// Names of the ops exercised by [`op_case`], one isolated graph each.
pub const CATALOG_OPS: [&str; 19] = [
    "matmul",
    "matmul_nt",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "softmax",
    "layer_norm",
    "conv2d_valid",
    "conv2d_same_time",
    "maxpool2d",
    "mean_axis",
    "concat",
    "scale",
    "slice",
    "reshape",
    "transpose",
    "sum_all",
    "bce_mean",
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive extents")
}

/// Values bounded away from zero, so a kink at zero is never straddled by
/// a central difference.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Distinct values spaced 0.05 apart in random order, so every pooling
/// window has a clear winner.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.05).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("positive extents")
}

/// Builds a small seeded graph applying `op` to parameter inputs, reduced
/// to a scalar through a fixed random weighting. Returns `None` for names
/// outside [`CATALOG_OPS`].
pub fn op_case(op: &str, seed: u64) -> Option<(Graph, NodeId)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut g = Graph::new();
    let y = match op {
        "matmul" => {
            let a = g.param("a", uniform(r, &[3, 4], -1.0, 1.0));
            let b = g.param("b", uniform(r, &[4, 5], -1.0, 1.0));
            g.matmul(a, b)
        }
        "matmul_nt" => {
            let a = g.param("a", uniform(r, &[3, 4], -1.0, 1.0));
            let b = g.param("b", uniform(r, &[5, 4], -1.0, 1.0));
            g.matmul_nt(a, b)
        }
        "add" => {
            let a = g.param("a", uniform(r, &[3, 4], -1.0, 1.0));
            let b = g.param("b", uniform(r, &[4], -1.0, 1.0));
            g.add(a, b)
        }
        "mul" => {
            let a = g.param("a", uniform(r, &[3, 4], -1.0, 1.0));
            let b = g.param("b", uniform(r, &[3, 4], -1.0, 1.0));
            g.mul(a, b)
        }
        "relu" => {
            let x = g.param("x", off_zero(r, &[4, 5]));
            g.relu(x)
        }
        "sigmoid" => {
            let x = g.param("x", uniform(r, &[4, 5], -3.0, 3.0));
            g.sigmoid(x)
        }
        "softmax" => {
            let x = g.param("x", uniform(r, &[3, 6], -2.0, 2.0));
            g.softmax_lastdim(x)
        }
        "layer_norm" => {
            let x = g.param("x", uniform(r, &[3, 6], -2.0, 2.0));
            let gamma = g.param("gamma", uniform(r, &[6], 0.5, 1.5));
            let beta = g.param("beta", uniform(r, &[6], -0.5, 0.5));
            g.layer_norm(x, gamma, beta)
        }
        "conv2d_valid" | "conv2d_same_time" => {
            let x = g.param("x", uniform(r, &[2, 5, 6], -1.0, 1.0));
            let k = g.param("k", uniform(r, &[3, 2, 3, 3], -0.5, 0.5));
            let b = g.param("b", uniform(r, &[3], -0.5, 0.5));
            if op == "conv2d_valid" {
                g.conv2d_valid(x, k, b)
            } else {
                g.conv2d_same_time(x, k, b)
            }
        }
        "maxpool2d" => {
            let x = g.param("x", spaced(r, &[2, 4, 6]));
            g.maxpool2d(x, 2, 3)
        }
        "mean_axis" => {
            let x = g.param("x", uniform(r, &[2, 3, 4], -1.0, 1.0));
            g.mean_axis(x, 1)
        }
        "concat" => {
            let a = g.param("a", uniform(r, &[2, 3], -1.0, 1.0));
            let b = g.param("b", uniform(r, &[2, 2], -1.0, 1.0));
            g.concat(&[a, b], 1)
        }
        "scale" => {
            let x = g.param("x", uniform(r, &[3, 4], -1.0, 1.0));
            g.scale(x, -1.7)
        }
        "slice" => {
            let x = g.param("x", uniform(r, &[3, 6], -1.0, 1.0));
            g.slice(x, 1, 2, 3)
        }
        "reshape" => {
            let x = g.param("x", uniform(r, &[3, 4], -1.0, 1.0));
            g.reshape(x, &[2, 6])
        }
        "transpose" => {
            let x = g.param("x", uniform(r, &[3, 4], -1.0, 1.0));
            g.transpose(x)
        }
        "sum_all" => {
            let x = g.param("x", uniform(r, &[3, 4], -1.0, 1.0));
            g.sum_all(x)
        }
        "bce_mean" => {
            let p = g.param("p", uniform(r, &[2, 4], 0.05, 0.95));
            let t = g.constant(uniform(r, &[2, 4], 0.0, 1.0));
            g.bce_mean(p, t)
        }
        _ => return None,
    }
    .expect("catalog shapes are consistent");
    // Positive weights avoid cancellation in summed gradients. Softmax and
    // layer norm subtract a weighted mean of the upstream gradient, so they
    // get signed weights instead; otherwise that mean nearly cancels every
    // entry and the true gradient sinks into the f32 rounding of the loss.
    let shape = g.value(y).shape().to_vec();
    let mut w = uniform(r, &shape, 0.5, 1.5);
    if matches!(op, "softmax" | "layer_norm") {
        for v in w.data_mut() {
            if r.gen_bool(0.5) {
                *v = -*v;
            }
        }
    }
    let w = g.constant(w);
    let weighted = g.mul(y, w).expect("same shape");
    let loss = g.sum_all(weighted).expect("any shape");
    Some((g, loss))
}
