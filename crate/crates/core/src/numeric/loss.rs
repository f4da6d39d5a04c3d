use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to predicted probabilities before the log.
pub const PROB_EPS: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-6;

fn check(pred: &Tensor, target: &Tensor) -> Result<usize> {
    if pred.shape() != target.shape() || pred.shape().len() != 2 {
        return Err(Error::Loss(format!(
            "cross-entropy needs equal [N,C] shapes, got {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let width = pred.shape()[1];
    for (name, t) in [("prediction", pred), ("target", target)] {
        for (i, row) in t.data().chunks_exact(width).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Loss(format!("{name} row {i} sums to {s}")));
            }
        }
    }
    Ok(pred.rows())
}

/// Mean over rows of −Σ target·log(max(pred, ε)). Targets may be soft.
pub fn cross_entropy(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let rows = check(pred, target)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.max(PROB_EPS).ln())
        .sum();
    Ok(total / rows as f64)
}

/// ∂(cross_entropy)/∂pred, zero where the clamp is active.
pub fn cross_entropy_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let rows = check(pred, target)? as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| if p > PROB_EPS { -t / (p * rows) } else { 0.0 })
        .collect();
    Tensor::from_vec(pred.shape(), data)
}
