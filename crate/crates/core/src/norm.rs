//! Batch normalization over the channel dimension of NCHW tensors.
//!
//! Training mode normalizes with per-channel batch statistics and maintains
//! running estimates by exponential moving average; inference mode
//! normalizes with the running estimates. The affine parameters gamma/beta
//! exist — they are counted as model parameters — but stay frozen at 1/0:
//! the layer-local loss is taken before this operation, so no gradient ever
//! reaches them, and the parameter count still reconciles with the
//! complexity table.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::FeatureTensor;

/// Per-channel normalization state.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormState<T> {
    /// Fresh state for `c` channels: running mean 0, running var 1,
    /// gamma 1, beta 0; momentum 0.1, epsilon 1e-5.
    pub fn new(c: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            momentum: T::from_f64(0.1),
            epsilon: T::from_f64(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Per-channel batch mean and biased variance over (n, h, w), plus the
/// squared-deviation sum needed for the unbiased running update.
fn batch_stats<T: Scalar>(input: &FeatureTensor<T>, c: usize) -> (T, T, T) {
    let plane = input.h * input.w;
    let count = input.n * plane;
    let count_t = T::from_f64(count as f64);
    let mut sum = T::zero();
    for n in 0..input.n {
        let s = input.sample(n);
        for &v in &s[c * plane..(c + 1) * plane] {
            sum = sum + v;
        }
    }
    let mean = sum / count_t;
    let mut sq = T::zero();
    for n in 0..input.n {
        let s = input.sample(n);
        for &v in &s[c * plane..(c + 1) * plane] {
            let d = v - mean;
            sq = sq + d * d;
        }
    }
    (mean, sq / count_t, sq)
}

fn normalize_channel<T: Scalar>(
    input: &FeatureTensor<T>,
    out: &mut FeatureTensor<T>,
    state: &BatchNormState<T>,
    c: usize,
    mean: T,
    var: T,
) {
    let plane = input.h * input.w;
    let inv_std = T::one() / (var + state.epsilon).sqrt();
    let g = state.gamma[c];
    let b = state.beta[c];
    for n in 0..input.n {
        let src = input.sample(n);
        let base = c * plane;
        let dst_base = out.idx(n, c, 0, 0);
        for i in 0..plane {
            out.data[dst_base + i] = g * (src[base + i] - mean) * inv_std + b;
        }
    }
}

/// Pure normalization pass. `training` selects batch statistics (biased
/// variance, matching the normalization convention of mainstream
/// frameworks) over the stored running statistics. Never mutates `state` —
/// frozen layers keep normalizing without their state drifting.
pub fn batchnorm_forward<T: Scalar>(
    input: &FeatureTensor<T>,
    state: &BatchNormState<T>,
    training: bool,
) -> Result<FeatureTensor<T>> {
    if input.c != state.channels() {
        return Err(Error::Config(format!(
            "batchnorm state has {} channels but input has {}",
            state.channels(),
            input.c
        )));
    }
    let mut out = FeatureTensor::zeros(input.n, input.c, input.h, input.w);
    for c in 0..input.c {
        let (mean, var) = if training {
            let (mean, var, _) = batch_stats(input, c);
            (mean, var)
        } else {
            (state.running_mean[c], state.running_var[c])
        };
        normalize_channel(input, &mut out, state, c, mean, var);
    }
    Ok(out)
}

/// Training-mode normalization that also folds the batch statistics into
/// the running estimates (unbiased variance for the running update). The
/// training loop calls this exactly once per batch for layers that are
/// still learning.
pub fn batchnorm_forward_update<T: Scalar>(
    input: &FeatureTensor<T>,
    state: &mut BatchNormState<T>,
) -> Result<FeatureTensor<T>> {
    if input.c != state.channels() {
        return Err(Error::Config(format!(
            "batchnorm state has {} channels but input has {}",
            state.channels(),
            input.c
        )));
    }
    let count = input.n * input.h * input.w;
    let mut out = FeatureTensor::zeros(input.n, input.c, input.h, input.w);
    for c in 0..input.c {
        let (mean, var, sq) = batch_stats(input, c);
        let m = state.momentum;
        let one = T::one();
        let var_unbiased =
            if count > 1 { sq / T::from_f64((count - 1) as f64) } else { var };
        state.running_mean[c] = (one - m) * state.running_mean[c] + m * mean;
        state.running_var[c] = (one - m) * state.running_var[c] + m * var_unbiased;
        normalize_channel(input, &mut out, state, c, mean, var);
    }
    Ok(out)
}
