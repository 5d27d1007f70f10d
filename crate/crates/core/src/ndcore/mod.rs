//! Dense tensors with reverse-mode differentiation.
//!
//! Reductions sum in index order and no primitive spawns threads, so a forward
//! pass is bit-reproducible for identical inputs.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{Precision, Tensor};

use crate::error::{Error, Result};

/// Central-difference estimate `(f(θ+εe_i) − f(θ−εe_i)) / 2ε` for every coordinate.
pub fn finite_diff_gradient(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("finite-difference point has non-finite coordinates"));
    }
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + eps;
        let plus = f(&point);
        point[i] = orig - eps;
        let minus = f(&point);
        point[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest `|a−b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests;
