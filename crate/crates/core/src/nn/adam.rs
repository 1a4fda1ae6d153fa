//! Adam with bias correction.

use super::grad::GradientSet;
use super::network::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParameterSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn matches(&self, params: &ParameterSet) -> bool {
        self.first.len() == params.entries().len()
            && self
                .first
                .iter()
                .zip(&self.second)
                .zip(params.tensors())
                .all(|((m, v), p)| m.shape() == p.shape() && v.shape() == p.shape())
    }
}

/// One Adam update. Gradients are validated before anything is mutated.
pub fn adam_step(params: &mut ParameterSet, grads: &GradientSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if !state.matches(params) {
        return Err(Error::Shape("adam state does not match parameters".into()));
    }
    if grads.tensors().len() != params.entries().len()
        || grads
            .tensors()
            .iter()
            .zip(params.tensors())
            .any(|(g, p)| g.shape() != p.shape())
    {
        return Err(Error::Shape("gradients do not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient passed to adam".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for (((pi, gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
