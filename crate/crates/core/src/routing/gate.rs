//! Gate arithmetic on plain vectors.
//!
//! These are the per-token definitions; [`crate::routing::MoEModel`] evaluates
//! the same maps in batched form on a graph.

use crate::error::{Error, Result};
use crate::expert::argmax;
use crate::numerics::{softmax, SeededRng, Tensor};

fn project(matrix: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    if matrix.cols() != x.len() {
        return Err(Error::Dimension(format!(
            "gate matrix {}x{} applied to input of length {}",
            matrix.rows(),
            matrix.cols(),
            x.len()
        )));
    }
    Ok((0..matrix.rows())
        .map(|r| matrix.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect())
}

/// Role probabilities `softmax(W x)` for a `R x D` role matrix.
pub fn soft_gate(x: &[f64], role_matrix: &Tensor) -> Result<Vec<f64>> {
    softmax(&project(role_matrix, x)?)
}

/// Within-role selection `softmax((W x + noise) / tau)` for a `K x D` matrix,
/// snapped to the exact one-hot of its argmax when `straight_through` is set.
pub fn hard_gate(x: &[f64], matrix: &Tensor, noise: &[f64], tau: f64, straight_through: bool) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let logits = project(matrix, x)?;
    if noise.len() != logits.len() {
        return Err(Error::Dimension("noise length differs from expert count".into()));
    }
    let scaled: Vec<f64> = logits.iter().zip(noise).map(|(l, n)| (l + n) / tau).collect();
    let soft = softmax(&scaled)?;
    if straight_through {
        Ok(one_hot(argmax(&soft), soft.len()))
    } else {
        Ok(soft)
    }
}

/// [`hard_gate`] with freshly sampled Gumbel noise.
pub fn hard_gate_sampled(
    x: &[f64],
    matrix: &Tensor,
    tau: f64,
    straight_through: bool,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let noise: Vec<f64> = (0..matrix.rows()).map(|_| rng.gumbel()).collect();
    hard_gate(x, matrix, &noise, tau, straight_through)
}

pub fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// `y = sum_r sum_j g[r] * h[r][j] * outputs[r][j]`, summed in role then
/// expert order.
pub fn combine(g: &[f64], h: &[Vec<f64>], outputs: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    if g.len() != h.len() || g.len() != outputs.len() {
        return Err(Error::Dimension("role counts of gate, selections and outputs differ".into()));
    }
    let dim = outputs
        .iter()
        .flatten()
        .next()
        .map(Vec::len)
        .ok_or_else(|| Error::Dimension("no expert outputs".into()))?;
    let mut y = vec![0.0; dim];
    for ((gr, hr), outs) in g.iter().zip(h).zip(outputs) {
        if hr.len() != outs.len() {
            return Err(Error::Dimension("selection length differs from expert count".into()));
        }
        for (hj, e) in hr.iter().zip(outs) {
            if e.len() != dim {
                return Err(Error::Dimension(format!("expert output of length {} (expected {dim})", e.len())));
            }
            let w = gr * hj;
            for (yi, ei) in y.iter_mut().zip(e) {
                *yi += w * ei;
            }
        }
    }
    Ok(y)
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn gate_entropy(p: &[f64]) -> f64 {
    crate::numerics::graph::entropy(p)
}
