//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-parameter Adam moments and step count.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps_hat: T,
}

impl<T: Scalar> AdamState<T> {
    /// beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(param_len: usize, learning_rate: f64) -> Self {
        AdamState {
            m: vec![T::zero(); param_len],
            v: vec![T::zero(); param_len],
            t: 0,
            learning_rate: T::from_f(learning_rate),
            beta1: T::from_f(0.9),
            beta2: T::from_f(0.999),
            eps_hat: T::from_f(1e-8),
        }
    }
}

/// One Adam update in place; increments the step count by exactly 1.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidShape(format!(
            "adam_step: param {} / grad {} / state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let one = T::one();
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (one - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (one - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - state.learning_rate * m_hat / (v_hat.sqrt() + state.eps_hat);
    }
    Ok(())
}
