//! Materialized reference attention. Builds the full score matrix; use only
//! as a correctness oracle.

use super::{AttnGrads, AttnOutput};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_transpose_a, Matrix};

fn softmax_weights(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    causal: bool,
    scale: f64,
) -> Result<(Matrix, Vec<f64>)> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "oracle with q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if causal && q.rows() != k.rows() {
        return Err(Error::shape("causal oracle needs as many queries as keys"));
    }
    let scores = matmul(q, k, true)?.scale(scale);
    let mut weights = Matrix::zeros(q.rows(), k.rows());
    let mut lse = Vec::with_capacity(q.rows());
    for i in 0..q.rows() {
        let visible = if causal { i + 1 } else { k.rows() };
        if visible == 0 {
            return Err(Error::DegenerateRow { row: i });
        }
        let row = &scores.row(i)[..visible];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|s| (s - max).exp()).sum();
        for (j, s) in row.iter().enumerate() {
            weights.set(i, j, (s - max).exp() / total);
        }
        lse.push(max + total.ln());
    }
    Ok((weights, lse))
}

/// `softmax(scale · q kᵀ + mask) v` with every weight materialized.
pub fn dense_oracle(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    causal: bool,
    scale: f64,
) -> Result<AttnOutput> {
    let (weights, lse) = softmax_weights(q, k, v, causal, scale)?;
    Ok(AttnOutput {
        o: matmul(&weights, v, false)?,
        lse,
    })
}

/// Analytic gradient of `⟨dO, O⟩` through the materialized attention.
///
/// Uses the softmax Jacobian row by row (`dS = P ∘ (dP − Σⱼ Pᵢⱼ dPᵢⱼ)`),
/// which is a different route from the `rowsum(dO ∘ O)` form of the
/// blockwise kernel.
pub fn dense_oracle_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_o: &Matrix,
    causal: bool,
    scale: f64,
) -> Result<AttnGrads> {
    let (weights, _) = softmax_weights(q, k, v, causal, scale)?;
    if d_o.rows() != q.rows() || d_o.cols() != v.cols() {
        return Err(Error::shape("output gradient shape"));
    }
    let dv = matmul_transpose_a(&weights, d_o)?;
    let dp = matmul(d_o, v, true)?;
    let mut ds = Matrix::zeros(weights.rows(), weights.cols());
    for i in 0..weights.rows() {
        let mut dot = 0.0;
        for j in 0..weights.cols() {
            dot += weights.get(i, j) * dp.get(i, j);
        }
        for j in 0..weights.cols() {
            ds.set(i, j, weights.get(i, j) * (dp.get(i, j) - dot));
        }
    }
    let dq = matmul(&ds, k, false)?.scale(scale);
    let dk = matmul_transpose_a(&ds, q)?.scale(scale);
    Ok(AttnGrads { dq, dk, dv })
}
