//! Dense tensors, reverse-mode gradients, optimization and seeded randomness.

pub mod graph;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig, LrSchedule, WeightDecay};
pub use rng::{gumbel_from_uniform, sample_gumbel, SeededRng};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Max-shifted softmax of a vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    let mut out = v.to_vec();
    graph::softmax_in_place(&mut out);
    Ok(out)
}

/// Anything that owns an ordered set of named tensors.
///
/// `visit` and `visit_mut` must yield tensors in the same order, and a model's
/// forward pass must bind its tensors onto a [`Graph`] in that same order so
/// that [`Graph::trainable_leaves`] lines up with [`Parameterized::trainable_mut`].
pub trait Parameterized {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor));

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, t| {
            if t.requires_grad() {
                out.push(t)
            }
        });
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.zero_grad());
    }

    fn set_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |_, t| t.set_requires_grad(on));
    }
}

impl Parameterized for Vec<Tensor> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, t) in self.iter().enumerate() {
            f(i.to_string(), t);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(i.to_string(), t);
        }
    }
}

/// Copies the adjoints of a finished backward pass into the model's trainable
/// tensors. Fails if any tensor still holds a gradient from a previous pass.
pub fn write_grads<M: Parameterized + ?Sized>(model: &mut M, g: &Graph) -> Result<()> {
    let leaves = g.trainable_leaves().to_vec();
    let mut params = model.trainable_mut();
    if params.len() != leaves.len() {
        return Err(Error::Contract(format!(
            "graph bound {} trainable leaves, model has {} trainable tensors",
            leaves.len(),
            params.len()
        )));
    }
    for (p, v) in params.iter_mut().zip(leaves) {
        p.set_grad(g.grad_or_zeros(v))?;
    }
    Ok(())
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients against central differences.
///
/// Returns `max |analytic - numeric| / (|analytic| + |numeric| + 1e-12)` over
/// every trainable scalar. `loss` must be deterministic: any randomness it
/// uses has to be re-seeded identically on every call.
pub fn grad_check<M, F>(model: &mut M, h: f64, mut loss: F) -> Result<f64>
where
    M: Parameterized,
    F: FnMut(&M, &mut Graph) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::Config(format!("finite-difference step {h} outside (0, 1e-3]")));
    }
    let mut g = Graph::new();
    let l = loss(model, &mut g)?;
    g.backward(l)?;
    let leaves = g.trainable_leaves().to_vec();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&v| g.grad_or_zeros(v)).collect();
    if analytic.len() != model.trainable_mut().len() {
        return Err(Error::Contract("loss did not bind every trainable tensor exactly once".into()));
    }

    let mut eval = |model: &M| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(model, &mut g)?;
        Ok(g.scalar(l))
    };
    let mut worst: f64 = 0.0;
    for (p, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = model.trainable_mut()[p].values()[j];
            model.trainable_mut()[p].values_mut()[j] = orig + h;
            let plus = eval(model)?;
            model.trainable_mut()[p].values_mut()[j] = orig - h;
            let minus = eval(model)?;
            model.trainable_mut()[p].values_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
