//! Momentum SGD and Adam with step learning-rate decay.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("sgd learning_rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("sgd momentum {} not in [0,1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("sgd weight_decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Momentum SGD state for one parameter tensor.
///
/// Update: `v <- m*v + g + wd*p`, then `p <- p - lr*v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Tensor,
}

impl SgdState {
    pub fn new(hyper: SgdHyper, dims: &[usize]) -> Self {
        Self {
            learning_rate: hyper.learning_rate,
            momentum: hyper.momentum,
            weight_decay: hyper.weight_decay,
            velocity: Tensor::zeros(dims),
        }
    }

    pub fn update(&mut self, params: &mut Tensor, grads: &Tensor) -> Result<()> {
        check_dims(params, grads, &self.velocity)?;
        let (lr, m, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        let v = self.velocity.data_mut();
        for ((p, g), v) in params.data_mut().iter_mut().zip(grads.data()).zip(v) {
            *v = m * *v + g + wd * *p;
            *p -= lr * *v;
        }
        Ok(())
    }
}

/// Pure form of one momentum-SGD step.
pub fn sgd_step(params: &Tensor, grads: &Tensor, state: SgdState) -> Result<(Tensor, SgdState)> {
    let mut params = params.clone();
    let mut state = state;
    state.update(&mut params, grads)?;
    Ok((params, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub lr_step_size: u64,
    pub lr_gamma: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl AdamHyper {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            lr_step_size: u64::MAX,
            lr_gamma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("adam learning_rate {}", self.learning_rate)));
        }
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::Config("adam betas must lie in (0,1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("adam epsilon must be positive".into()));
        }
        if self.lr_step_size == 0 {
            return Err(Error::Config("adam lr_step_size must be positive".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::Config(format!("adam lr_gamma {} not in (0,1]", self.lr_gamma)));
        }
        Ok(())
    }
}

/// Adam state for one parameter tensor, bias-corrected, with step decay of the
/// learning rate every `lr_step_size` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step_count: u64,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, dims: &[usize]) -> Self {
        Self {
            hyper,
            step_count: 0,
            first_moment: Tensor::zeros(dims),
            second_moment: Tensor::zeros(dims),
        }
    }

    pub fn effective_learning_rate(&self) -> f64 {
        let decays = self.step_count / self.hyper.lr_step_size;
        self.hyper.learning_rate * self.hyper.lr_gamma.powf(decays as f64)
    }

    pub fn update(&mut self, params: &mut Tensor, grads: &Tensor) -> Result<()> {
        check_dims(params, grads, &self.first_moment)?;
        let lr = self.effective_learning_rate();
        self.step_count += 1;
        let AdamHyper {
            beta1, beta2, epsilon, ..
        } = self.hyper;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let m = self.first_moment.data_mut();
        let v = self.second_moment.data_mut();
        for (((p, g), m), v) in params.data_mut().iter_mut().zip(grads.data()).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Pure form of one Adam step.
pub fn adam_step(params: &Tensor, grads: &Tensor, state: AdamState) -> Result<(Tensor, AdamState)> {
    let mut params = params.clone();
    let mut state = state;
    state.update(&mut params, grads)?;
    Ok((params, state))
}

fn check_dims(params: &Tensor, grads: &Tensor, state: &Tensor) -> Result<()> {
    if params.dims() != grads.dims() || params.dims() != state.dims() {
        return Err(Error::Shape(format!(
            "optimizer dims mismatch: params {:?}, grads {:?}, state {:?}",
            params.dims(),
            grads.dims(),
            state.dims()
        )));
    }
    Ok(())
}

/// Optimizer over an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Vec<SgdState>),
    Adam(Vec<AdamState>),
}

impl Optimizer {
    pub fn sgd(hyper: SgdHyper, params: &[&Tensor]) -> Self {
        Optimizer::Sgd(params.iter().map(|p| SgdState::new(hyper, p.dims())).collect())
    }

    pub fn adam(hyper: AdamHyper, params: &[&Tensor]) -> Self {
        Optimizer::Adam(params.iter().map(|p| AdamState::new(hyper, p.dims())).collect())
    }

    /// Overrides the SGD learning rate of every tracked tensor. Adam keeps its own schedule.
    pub fn set_sgd_learning_rate(&mut self, lr: f64) {
        if let Optimizer::Sgd(states) = self {
            states.iter_mut().for_each(|s| s.learning_rate = lr);
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        let n = match self {
            Optimizer::Sgd(s) => s.len(),
            Optimizer::Adam(s) => s.len(),
        };
        if params.len() != n || grads.len() != n {
            return Err(Error::Shape(format!(
                "optimizer tracks {n} tensors, got {} params and {} grads",
                params.len(),
                grads.len()
            )));
        }
        match self {
            Optimizer::Sgd(states) => {
                for ((s, p), g) in states.iter_mut().zip(params).zip(grads) {
                    s.update(p, g)?;
                }
            }
            Optimizer::Adam(states) => {
                for ((s, p), g) in states.iter_mut().zip(params).zip(grads) {
                    s.update(p, g)?;
                }
            }
        }
        Ok(())
    }
}
