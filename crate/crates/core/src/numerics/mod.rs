//! Dense arithmetic, optimizers, seeded randomness and gradient checking.

mod gradcheck;
mod optim;
mod rng;
mod tensor;

pub use gradcheck::{finite_difference_check, MAX_EPS, MIN_EPS};
pub use optim::{adam_step, sgd_step, AdamHyper, AdamState, Optimizer, SgdHyper, SgdState};
pub use rng::{derive_seed, Rng};
pub use tensor::{flatten, unflatten_into, Tensor};

use crate::error::{Error, Result};

/// Ordered access to a model's trainable tensors.
///
/// The order is the model's declared parameter order; gradients, optimizer
/// state and checkpoints all follow it.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn flat_params(&self) -> Tensor {
        flatten(&self.tensors())
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        unflatten_into(flat, &mut self.tensors_mut())
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean norm.
pub fn unit_normalize(v: &Tensor) -> Result<Tensor> {
    if v.rank() != 1 {
        return Err(Error::Shape(format!("unit_normalize needs a vector, got {:?}", v.dims())));
    }
    Tensor::vector(unit_normalize_slice(v.data())?)
}

pub fn unit_normalize_slice(v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate(format!("cannot normalize vector with norm {norm}")));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax cross-entropy of `logits` against class `target`.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[target] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
