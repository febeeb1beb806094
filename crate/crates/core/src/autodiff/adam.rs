use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A set of named, trainable tensors with a stable order.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper<P: Parameters + ?Sized>(params: &P, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.named_params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { first_moment: zeros.clone(), second_moment: zeros, step: 0, beta1, beta2, eps }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Precondition(format!("learning rate must be positive, got {lr}")));
    }
    let named = params.named_params();
    if named.len() != grads.len() || named.len() != state.first_moment.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            named.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((name, p), g) in named.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape { op: "adam_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
        }
        if !g.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for parameter {name}")));
        }
    }
    drop(named);

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .params_mut()
        .into_iter()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let it = p
            .values_mut()
            .iter_mut()
            .zip(g.values())
            .zip(m.values_mut().iter_mut().zip(v.values_mut().iter_mut()));
        for ((w, &g), (m, v)) in it {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
