//! Adam optimizer with bias-corrected moment estimates.
//!
//! One state instance per parameter buffer (a layer's kernels, its bias, a
//! head's weight matrix, ...). Step count, moments, and hyperparameters
//! travel with the state so checkpoints can resume optimization exactly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// First/second moment estimates plus hyperparameters for one parameter
/// buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state for `len` parameters with the given learning rate and the
    /// standard constants beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(len: usize, lr: T) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }
}

/// One Adam update: advances `state.t`, refreshes moments, and moves
/// `params` against the bias-corrected gradient estimate.
///
/// Non-finite gradients abort before any state is touched; the caller wraps
/// the error with the owning layer's identity.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam buffers disagree: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient at parameter index {pos}"
        )));
    }
    state.t += 1;
    let one = T::one();
    let b1 = state.beta1;
    let b2 = state.beta2;
    // Bias corrections for step t.
    let t_i32 = state.t.min(i32::MAX as u64) as i32;
    let bc1 = one - b1.powi(t_i32);
    let bc2 = one - b2.powi(t_i32);
    let lr = state.lr;
    let eps = state.eps;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
