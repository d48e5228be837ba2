//! Central finite-difference verification for every registered tape op.
//!
//! Each op gets a tiny graph with randomized leaves, a fixed random linear
//! functional as the scalar objective, and a comparison of the tape
//! gradient against central differences with step 1e-5. The reported
//! number is `max |analytic - numeric| / max(1e-8, |numeric|)` over every
//! element of every leaf.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NodeId};
use crate::tensor::Tensor;
use crate::Real;

/// Step for central differences.
pub const FD_STEP: Real = 1e-5;

/// Entries where analytic and numeric gradients are both below this are
/// counted as agreeing: a central difference of an O(1) objective carries
/// ~1e-11 of rounding noise, so disagreements under 1e-6 are below what
/// the probe can resolve (a genuinely wrong gradient leaves one side
/// large and is still caught by the relative test).
const FD_AGREE_BELOW: Real = 1e-6;

fn fd_relative_error(analytic: Real, numeric: Real) -> Real {
    if analytic.abs() < FD_AGREE_BELOW && numeric.abs() < FD_AGREE_BELOW {
        0.0
    } else {
        (analytic - numeric).abs() / numeric.abs().max(1e-8)
    }
}

/// Every op the tape implements, in registration order.
pub const REGISTERED_OPS: &[&str] = &[
    "identity",
    "scale",
    "add",
    "mul",
    "sum",
    "reshape",
    "relu",
    "silu",
    "softplus",
    "linear",
    "channel_linear",
    "conv3d",
    "batch_norm",
    "layer_norm",
    "gather_seq",
    "scatter_seq",
    "s6_scan",
    "mean_positions",
    "softmax",
    "cross_entropy",
];

struct Case {
    leaves: Vec<Tensor>,
    index: Option<Arc<Vec<usize>>>,
    target: usize,
    weights: Vec<Real>,
}

fn default_shapes(op: &str) -> Vec<Vec<usize>> {
    match op {
        "identity" | "sum" | "reshape" => vec![vec![2, 3]],
        "scale" => vec![vec![5]],
        "add" | "mul" => vec![vec![2, 3], vec![2, 3]],
        "relu" | "silu" | "softplus" => vec![vec![7]],
        "linear" => vec![vec![3, 4], vec![2, 4], vec![2]],
        "channel_linear" => vec![vec![3, 5], vec![2, 3], vec![2]],
        "conv3d" => vec![vec![2, 4, 3, 3], vec![2, 2, 2, 2, 2], vec![2]],
        "batch_norm" => vec![vec![3, 8], vec![3], vec![3]],
        "layer_norm" => vec![vec![3, 5], vec![5], vec![5]],
        "gather_seq" => vec![vec![3, 6]],
        "scatter_seq" => vec![vec![6, 3]],
        "s6_scan" => vec![vec![5, 2], vec![5, 1], vec![5, 3], vec![5, 3], vec![2, 3]],
        "mean_positions" => vec![vec![3, 4]],
        "softmax" => vec![vec![2, 5]],
        "cross_entropy" => vec![vec![4]],
        _ => vec![],
    }
}

fn build_case(op: &str, input_shapes: &[Vec<usize>], seed: u64) -> Result<Case> {
    let shapes = if input_shapes.is_empty() {
        default_shapes(op)
    } else {
        input_shapes.to_vec()
    };
    if shapes.is_empty() {
        return Err(Error::invalid(format!("grad_check: unknown op '{op}'")));
    }
    let expected = default_shapes(op).len();
    if shapes.len() != expected {
        return Err(Error::invalid(format!(
            "grad_check: op '{op}' takes {expected} input shapes, got {}",
            shapes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut leaves = Vec::new();
    for (i, shape) in shapes.iter().enumerate() {
        let numel: usize = shape.iter().product();
        let data: Vec<Real> = (0..numel)
            .map(|_| {
                let v: Real = rng.random_range(-1.0..1.0);
                match (op, i) {
                    // Keep relu inputs away from its kink.
                    ("relu", 0) => v + 0.1 * v.signum() + if v == 0.0 { 0.1 } else { 0.0 },
                    // Positive step sizes, as softplus would produce.
                    ("s6_scan", 1) => 0.05 + 0.5 * (v + 1.0) / 2.0,
                    // Stable diagonal.
                    ("s6_scan", 4) => -0.1 - (v + 1.0),
                    _ => v,
                }
            })
            .collect();
        leaves.push(Tensor::new(shape.clone(), data)?);
    }
    let index = match op {
        "gather_seq" => {
            let l = shapes[0][1];
            Some(Arc::new(random_permutation(l, &mut rng)))
        }
        "scatter_seq" => {
            let l = shapes[0][0];
            Some(Arc::new(random_permutation(l, &mut rng)))
        }
        _ => None,
    };
    let target = match op {
        "cross_entropy" => rng.random_range(0..shapes[0].iter().product::<usize>()),
        _ => 0,
    };
    // Fixed random functional over the op output; drawn away from zero so
    // objective gradients stay O(1).
    let out_len = output_len(op, &shapes);
    let weights = (0..out_len)
        .map(|_| {
            let mag: Real = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Ok(Case {
        leaves,
        index,
        target,
        weights,
    })
}

fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

fn output_len(op: &str, shapes: &[Vec<usize>]) -> usize {
    let numel = |s: &Vec<usize>| s.iter().product::<usize>();
    match op {
        "sum" | "cross_entropy" => 1,
        "linear" => shapes[0][0] * shapes[1][0],
        "channel_linear" => shapes[1][0] * shapes[0][1],
        "conv3d" => {
            let x = &shapes[0];
            let w = &shapes[1];
            w[0] * (x[1] - w[2] + 1) * (x[2] - w[3] + 1) * (x[3] - w[4] + 1)
        }
        "mean_positions" => shapes[0][0],
        _ => numel(&shapes[0]),
    }
}

fn wire(op: &str, g: &mut Graph, ids: &[NodeId], case: &Case) -> Result<NodeId> {
    match op {
        "identity" => g.identity(ids[0]),
        "scale" => g.scale(ids[0], 1.7),
        "add" => g.add(ids[0], ids[1]),
        "mul" => g.mul(ids[0], ids[1]),
        "sum" => g.sum(ids[0]),
        "reshape" => {
            let n = g.value(ids[0]).len();
            g.reshape(ids[0], vec![n])
        }
        "relu" => g.relu(ids[0]),
        "silu" => g.silu(ids[0]),
        "softplus" => g.softplus(ids[0]),
        "linear" => g.linear(ids[0], ids[1], ids[2]),
        "channel_linear" => g.channel_linear(ids[0], ids[1], ids[2]),
        "conv3d" => g.conv3d(ids[0], ids[1], ids[2]),
        "batch_norm" => g.batch_norm(ids[0], ids[1], ids[2], 1e-5, None),
        "layer_norm" => g.layer_norm(ids[0], ids[1], ids[2], 1e-5),
        "gather_seq" => g.gather_seq(ids[0], case.index.clone().unwrap()),
        "scatter_seq" => g.scatter_seq(ids[0], case.index.clone().unwrap()),
        "s6_scan" => g.s6_scan(ids[0], ids[1], ids[2], ids[3], ids[4]),
        "mean_positions" => g.mean_positions(ids[0]),
        "softmax" => g.softmax(ids[0]),
        "cross_entropy" => g.cross_entropy_logits(ids[0], case.target),
        other => Err(Error::invalid(format!("grad_check: unknown op '{other}'"))),
    }
}

/// Scalar objective: fixed functional of the op output.
fn objective(op: &str, leaves: &[Tensor], case: &Case) -> Result<Real> {
    let mut g = Graph::new(Mode::Train);
    let ids: Vec<NodeId> = leaves
        .iter()
        .map(|t| g.input(t.clone()))
        .collect::<Result<_>>()?;
    let out = wire(op, &mut g, &ids, case)?;
    let n = g.value(out).len();
    let flat = g.reshape(out, vec![n])?;
    let w = g.input(Tensor::from_vec(case.weights.clone()))?;
    let prod = g.mul(flat, w)?;
    let total = g.sum(prod)?;
    Ok(g.value(total).data()[0])
}

fn analytic_grads(op: &str, case: &Case) -> Result<Vec<Vec<Real>>> {
    let mut g = Graph::new(Mode::Train);
    let ids: Vec<NodeId> = case
        .leaves
        .iter()
        .enumerate()
        .map(|(slot, t)| g.param(slot, t))
        .collect::<Result<_>>()?;
    let out = wire(op, &mut g, &ids, case)?;
    let n = g.value(out).len();
    let flat = g.reshape(out, vec![n])?;
    let w = g.input(Tensor::from_vec(case.weights.clone()))?;
    let prod = g.mul(flat, w)?;
    let total = g.sum(prod)?;
    g.backward(total)?;
    Ok(ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; case.leaves[i].len()])
        })
        .collect())
}

/// Max relative error between tape gradients and central differences for
/// one registered op. Pass empty `input_shapes` for the op's defaults.
pub fn grad_check(op_name: &str, input_shapes: &[Vec<usize>], seed: u64) -> Result<Real> {
    let case = build_case(op_name, input_shapes, seed)?;
    let analytic = analytic_grads(op_name, &case)?;
    let mut max_rel: Real = 0.0;
    let mut leaves = case.leaves.clone();
    for li in 0..leaves.len() {
        for ei in 0..leaves[li].len() {
            let orig = leaves[li].data()[ei];
            leaves[li].data_mut()[ei] = orig + FD_STEP;
            let fp = objective(op_name, &leaves, &case)?;
            leaves[li].data_mut()[ei] = orig - FD_STEP;
            let fm = objective(op_name, &leaves, &case)?;
            leaves[li].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let rel = fd_relative_error(analytic[li][ei], numeric);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Convenience wrapper with the op's default shapes.
pub fn grad_check_default(op_name: &str, seed: u64) -> Result<Real> {
    grad_check(op_name, &[], seed)
}

/// Compare externally supplied analytic gradients of `objective(leaves)`
/// against central differences, returning the max relative error. Used by
/// the whole-block and whole-model gradient checks.
pub fn fd_max_rel_error<F>(
    objective: F,
    leaves: &[Tensor],
    analytic: &[Vec<Real>],
    step: Real,
) -> Result<Real>
where
    F: Fn(&[Tensor]) -> Result<Real>,
{
    if analytic.len() != leaves.len() {
        return Err(Error::invalid(
            "fd_max_rel_error: analytic gradient count mismatch".to_string(),
        ));
    }
    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut max_rel: Real = 0.0;
    for li in 0..work.len() {
        for ei in 0..work[li].len() {
            let orig = work[li].data()[ei];
            work[li].data_mut()[ei] = orig + step;
            let fp = objective(&work)?;
            work[li].data_mut()[ei] = orig - step;
            let fm = objective(&work)?;
            work[li].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let rel = fd_relative_error(analytic[li][ei], numeric);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
