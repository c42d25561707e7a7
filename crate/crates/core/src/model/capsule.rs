//! Capsule-layer building blocks on tape variables.
//!
//! Shapes use `B` for batch, `N` for primary capsules, `L` heads, `K²` grid
//! nodes per head, `M` classes and `D` capsule width. Leading axes written as
//! `...` may be any batch prefix.

use gracaps_tensor::{CustomOp, Scalar, Tape, Tensor, TensorError, Var, L2_EPS};

use crate::error::{config_err, contract, Result};

/// Gaussian spatial graph over a `k`×`k` grid in row-major node order:
/// `A[i][j] = exp(-|p_i - p_j|² / (2σ²))`.
pub fn build_adjacency<T: Scalar>(k: usize, sigma: f64) -> Result<Tensor<T>> {
    if k == 0 {
        return Err(config_err("grid_side", "must be positive"));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(config_err("sigma", format!("must be a positive real, got {sigma}")));
    }
    let n = k * k;
    let mut a = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = ((i / k) as f64, (i % k) as f64);
        for j in 0..n {
            let (yj, xj) = ((j / k) as f64, (j % k) as f64);
            let d2 = (yi - yj).powi(2) + (xi - xj).powi(2);
            a.push(T::lit((-d2 / (2.0 * sigma * sigma)).exp()));
        }
    }
    Ok(Tensor::new([n, n], a)?)
}

/// Divides every row by its sum.
pub fn row_normalize<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let n = a.shape()[1];
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        let total: T = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

struct Squash;

fn squash_factors<T: Scalar>(q: T) -> (T, T) {
    // f(q) = q / ((1+q) r), r = sqrt(q + eps); returns (f, df/dq).
    let one = T::one();
    let r = (q + T::lit(L2_EPS)).sqrt();
    let f = q / ((one + q) * r);
    let df = one / ((one + q) * (one + q) * r) - q / (T::lit(2.0) * (one + q) * r * r * r);
    (f, df)
}

impl<T: Scalar> CustomOp<T> for Squash {
    fn name(&self) -> &'static str {
        "squash"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>> {
        let s = inputs[0];
        let d = *s.shape().last().expect("squash input has rank >= 1");
        let mut out = vec![T::zero(); s.numel()];
        for ((sr, gr), or) in s.data().chunks(d).zip(grad.data().chunks(d)).zip(out.chunks_mut(d)) {
            let q: T = sr.iter().map(|&v| v * v).sum();
            let (f, df) = squash_factors(q);
            let sg: T = sr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            let k = T::lit(2.0) * df * sg;
            for ((o, &sv), &gv) in or.iter_mut().zip(sr).zip(gr) {
                *o = f * gv + k * sv;
            }
        }
        vec![Tensor::new(s.shape().to_vec(), out).expect("same shape as input")]
    }
}

/// Rescales each vector along the last axis to norm `|s|²/(1+|s|²)`,
/// keeping its direction.
pub fn squash<'t, T: Scalar>(s: Var<'t, T>) -> Result<Var<'t, T>> {
    let x = s.value();
    let Some(&d) = x.shape().last() else {
        return Err(TensorError::Axis { op: "squash", axis: 0, rank: 0 }.into());
    };
    let mut out = x.clone();
    if d > 0 {
        for row in out.data_mut().chunks_mut(d) {
            let q: T = row.iter().map(|&v| v * v).sum();
            let (f, _) = squash_factors(q);
            row.iter_mut().for_each(|v| *v = *v * f);
        }
    }
    Ok(Var::custom(Box::new(Squash), &[s], out)?)
}

/// Per-capsule projection without bias: `[B, N, Din] × [N, Din, Dout] → [B, N, Dout]`.
pub fn transform_capsules<'t, T: Scalar>(u: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    let (us, ws) = (u.shape(), w.shape());
    if us.len() != 3 || ws.len() != 3 || us[1] != ws[0] || us[2] != ws[1] {
        return Err(contract(format!(
            "transform_capsules: capsules {us:?} do not fit weights {ws:?}"
        )));
    }
    let per_capsule = u.permute(&[1, 0, 2])?.matmul(&w)?;
    Ok(per_capsule.permute(&[1, 0, 2])?)
}

/// Attention of every class over a head's nodes:
/// `softmax_nodes(A · x · W)`, `x: [..., K², D]` → `[..., K², M]`.
pub fn head_attention<'t, T: Scalar>(
    x: Var<'t, T>,
    adjacency: Var<'t, T>,
    w_pool: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let logits = adjacency.matmul(&x.matmul(&w_pool)?)?;
    let node_axis = logits.shape().len() - 2;
    Ok(logits.softmax(node_axis)?)
}

/// Attention-weighted node sum: `attᵀ · x`, giving `[..., M, D]`.
pub fn head_pool<'t, T: Scalar>(att: Var<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(att.transpose()?.matmul(&x)?)
}

/// Averages the per-head pooled capsules along `head_axis` and squashes.
pub fn aggregate_and_squash<'t, T: Scalar>(pooled: Var<'t, T>, head_axis: usize) -> Result<Var<'t, T>> {
    let shape = pooled.shape();
    match shape.get(head_axis) {
        Some(0) => return Err(contract("aggregate_and_squash: no heads to aggregate")),
        None => {
            return Err(TensorError::Axis {
                op: "aggregate_and_squash",
                axis: head_axis,
                rank: shape.len(),
            }
            .into())
        }
        Some(_) => {}
    }
    squash(pooled.mean(head_axis)?)
}

/// Routing by agreement over votes `[B, N, M, D]` for `iterations` rounds.
pub fn dynamic_routing<'t, T: Scalar>(votes: Var<'t, T>, iterations: usize) -> Result<Var<'t, T>> {
    if iterations == 0 {
        return Err(config_err("routing_iterations", "must be positive"));
    }
    let shape = votes.shape();
    let [b, n, m, d] = shape[..] else {
        return Err(contract(format!("dynamic_routing: votes must be [B, N, M, D], got {shape:?}")));
    };
    let tape = votes.tape();
    let by_class = votes.permute(&[0, 2, 1, 3])?; // [B, M, N, D]
    let mut logits = tape.constant(Tensor::zeros([b, m, n]));
    let mut v = None;
    for it in 0..iterations {
        let coupling = logits.softmax(1)?.reshape([b, m, 1, n])?;
        let s = coupling.matmul(&by_class)?.reshape([b, m, d])?;
        let out = squash(s)?;
        if it + 1 < iterations {
            let agreement = by_class.matmul(&out.reshape([b, m, d, 1])?)?.reshape([b, m, n])?;
            logits = logits.add(&agreement)?;
        }
        v = Some(out);
    }
    Ok(v.expect("at least one iteration"))
}

/// Routing-free baseline: squash of the mean vote, `[B, N, M, D] → [B, M, D]`.
pub fn average_votes<'t, T: Scalar>(votes: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = votes.shape();
    if shape.len() != 4 || shape[1] == 0 {
        return Err(contract(format!("average_votes: votes must be [B, N>0, M, D], got {shape:?}")));
    }
    squash(votes.mean(1)?)
}

/// Capsule lengths along the last axis.
pub fn class_norms<'t, T: Scalar>(v: Var<'t, T>) -> Result<Var<'t, T>> {
    let last = v.shape().len().saturating_sub(1);
    Ok(v.l2_norm(last)?)
}

pub const M_POS: f64 = 0.9;
pub const M_NEG: f64 = 0.1;
pub const LAMBDA: f64 = 0.5;

/// Hinge-squared loss on capsule lengths, averaged over the batch.
pub fn margin_loss<'t, T: Scalar>(v: Var<'t, T>, targets: &[usize]) -> Result<Var<'t, T>> {
    let shape = v.shape();
    let [b, m, _] = shape[..] else {
        return Err(contract(format!("margin_loss: capsules must be [B, M, D], got {shape:?}")));
    };
    if targets.len() != b {
        return Err(contract(format!("margin_loss: {} targets for batch of {b}", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= m) {
        return Err(contract(format!("margin_loss: target {t} outside 0..{m}")));
    }
    let tape: &'t Tape<T> = v.tape();
    let mut onehot = vec![T::zero(); b * m];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * m + t] = T::one();
    }
    let present = tape.constant(Tensor::new([b, m], onehot.clone())?);
    let absent = tape.constant(Tensor::new([b, m], onehot.iter().map(|&x| T::one() - x).collect())?);
    let norms = class_norms(v)?;
    let pos = norms.neg().add_scalar(T::lit(M_POS)).relu().square().mul(&present)?;
    let neg = norms
        .add_scalar(T::lit(-M_NEG))
        .relu()
        .square()
        .mul(&absent)?
        .scale(T::lit(LAMBDA));
    Ok(pos.add(&neg)?.sum_all().scale(T::lit(1.0 / b as f64)))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
