//! 2D convolution: standard and channel-wise grouped, forward and the
//! weight-gradient backward pass.
//!
//! Implementation is im2col + GEMM. Each sample's receptive fields are
//! unrolled into a column matrix; the kernel tensor, viewed as a
//! `(c_out, c_in_per_group * k * k)` matrix, then multiplies it. Grouped
//! convolution falls out naturally: group `g`'s kernel rows, column-matrix
//! rows, and output channels are all contiguous blocks, so each group is one
//! GEMM call. With `groups = 1` the same code path is the standard
//! convolution.
//!
//! Layer-local training never needs gradients with respect to the layer
//! input — each layer learns from its own loss — so the backward pass
//! produces weight and bias gradients only.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::FeatureTensor;
use rand::Rng;

/// Convolution weights: kernels shaped (c_out, c_in_per_group, k, k) plus a
/// per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T = f32> {
    pub kernels: Vec<T>,
    pub bias: Vec<T>,
    pub c_out: usize,
    pub c_in_per_group: usize,
    pub k: usize,
    pub groups: usize,
}

impl<T: Scalar> ConvWeights<T> {
    /// Builds weights from raw buffers, validating shape bookkeeping.
    pub fn new(
        kernels: Vec<T>,
        bias: Vec<T>,
        c_out: usize,
        c_in_per_group: usize,
        k: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || c_out == 0 || c_in_per_group == 0 || k == 0 {
            return Err(Error::Config(format!(
                "conv weights need positive dims: c_out={c_out} c_in_per_group={c_in_per_group} k={k} groups={groups}"
            )));
        }
        if c_out % groups != 0 {
            return Err(Error::Config(format!(
                "c_out {c_out} not divisible by groups {groups}"
            )));
        }
        if kernels.len() != c_out * c_in_per_group * k * k {
            return Err(Error::Config(format!(
                "kernel buffer length {} does not match (c_out={c_out}, c_in_per_group={c_in_per_group}, k={k})",
                kernels.len()
            )));
        }
        if bias.len() != c_out {
            return Err(Error::Config(format!(
                "bias length {} does not match c_out {c_out}",
                bias.len()
            )));
        }
        Ok(Self { kernels, bias, c_out, c_in_per_group, k, groups })
    }

    /// He-uniform initialization: kernels ~ U(-b, b) with
    /// b = sqrt(6 / fan_in), fan_in = c_in_per_group * k^2; bias zero.
    /// Deterministic given the RNG state.
    pub fn he_uniform<R: Rng>(
        c_out: usize,
        c_in: usize,
        k: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 {
            return Err(Error::Config(format!(
                "input channels {c_in} not divisible by groups {groups}"
            )));
        }
        let c_in_per_group = c_in / groups;
        let fan_in = (c_in_per_group * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let kernels = (0..c_out * c_in_per_group * k * k)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        let bias = vec![T::zero(); c_out];
        Self::new(kernels, bias, c_out, c_in_per_group, k, groups)
    }

    /// Total input channels this kernel expects.
    pub fn c_in(&self) -> usize {
        self.c_in_per_group * self.groups
    }

    /// Kernel matrix row length: c_in_per_group * k * k.
    pub fn row_len(&self) -> usize {
        self.c_in_per_group * self.k * self.k
    }

    pub fn cast<U: Scalar>(&self) -> ConvWeights<U> {
        ConvWeights {
            kernels: self.kernels.iter().map(|v| U::from_f64(v.into_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64(v.into_f64())).collect(),
            c_out: self.c_out,
            c_in_per_group: self.c_in_per_group,
            k: self.k,
            groups: self.groups,
        }
    }
}

/// Output spatial dims for a conv over (h, w).
pub fn conv_output_dims(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::Config(format!(
            "spatial dims ({h}, {w}) with padding {padding} collapse below kernel size {k}"
        )));
    }
    Ok(((h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1))
}

/// Unrolled receptive fields for one batch: sample `n`'s block is a
/// row-major `(c_in * k * k) x (oh * ow)` matrix at
/// `cols[n * rows * ohw ..]`. Built once per (batch, layer) and shared by
/// the forward pass, the weight-gradient pass, and the post-update
/// re-forward, which all consume the identical unrolled input.
#[derive(Debug)]
pub struct BatchCols<T> {
    pub cols: Vec<T>,
    pub n: usize,
    pub rows: usize,
    pub ohw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl<T: Scalar> BatchCols<T> {
    /// Sample n's column matrix.
    fn sample(&self, n: usize) -> &[T] {
        let stride = self.rows * self.ohw;
        &self.cols[n * stride..(n + 1) * stride]
    }
}

/// Unrolls every sample of `input` for a k x k convolution.
pub fn im2col_batch<T: Scalar>(
    input: &FeatureTensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<BatchCols<T>> {
    let (oh, ow) = conv_output_dims(input.h, input.w, k, stride, padding)?;
    let rows = input.c * k * k;
    let ohw = oh * ow;
    let mut cols = vec![T::zero(); input.n * rows * ohw];
    let stride_n = rows * ohw;
    for n in 0..input.n {
        im2col_sample(input, n, k, stride, padding, oh, ow, &mut cols[n * stride_n..(n + 1) * stride_n]);
    }
    Ok(BatchCols { cols, n: input.n, rows, ohw, oh, ow })
}

/// Fills `out` (pre-zeroed length rows * oh * ow) with sample `n`'s columns.
/// Row r = (ci * k + u) * k + v holds input channel ci at kernel offset
/// (u, v); column y * ow + x is the output position.
fn im2col_sample<T: Scalar>(
    input: &FeatureTensor<T>,
    n: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let (h, w) = (input.h, input.w);
    let src = input.sample(n);
    let ohw = oh * ow;
    for ci in 0..input.c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                let dst = &mut out[row * ohw..(row + 1) * ohw];
                for y in 0..oh {
                    let in_y = (y * stride + u) as isize - padding as isize;
                    if in_y < 0 || in_y >= h as isize {
                        continue; // stays zero (padding)
                    }
                    let src_row = &plane[in_y as usize * w..(in_y as usize + 1) * w];
                    let dst_row = &mut dst[y * ow..(y + 1) * ow];
                    if stride == 1 {
                        // in_x = x - padding + v is contiguous in x; copy the
                        // in-bounds segment in one go.
                        let shift = v as isize - padding as isize;
                        let x_lo = (-shift).max(0) as usize;
                        let x_hi = ow.min(((w as isize) - shift).max(0) as usize);
                        if x_lo < x_hi {
                            let s_lo = (x_lo as isize + shift) as usize;
                            dst_row[x_lo..x_hi]
                                .copy_from_slice(&src_row[s_lo..s_lo + (x_hi - x_lo)]);
                        }
                    } else {
                        for x in 0..ow {
                            let in_x = (x * stride + v) as isize - padding as isize;
                            if in_x >= 0 && in_x < w as isize {
                                dst_row[x] = src_row[in_x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution from pre-built columns. One GEMM per (sample, group):
/// kernels block (c_out_g x row_len) times cols block (row_len x ohw)
/// accumulated onto a bias-filled output block.
pub fn forward_from_cols<T: Scalar>(
    cols: &BatchCols<T>,
    weights: &ConvWeights<T>,
) -> Result<FeatureTensor<T>> {
    let row_len = weights.row_len();
    if cols.rows != row_len * weights.groups {
        return Err(Error::Config(format!(
            "column rows {} do not match kernel layout {} x {} groups",
            cols.rows, row_len, weights.groups
        )));
    }
    let c_out_g = weights.c_out / weights.groups;
    let mut out = FeatureTensor::zeros(cols.n, weights.c_out, cols.oh, cols.ow);
    let ohw = cols.ohw;
    for n in 0..cols.n {
        let sample_cols = cols.sample(n);
        let out_sample = out.sample_mut(n);
        for g in 0..weights.groups {
            let a = &weights.kernels[g * c_out_g * row_len..(g + 1) * c_out_g * row_len];
            let b = &sample_cols[g * row_len * ohw..(g + 1) * row_len * ohw];
            let c = &mut out_sample[g * c_out_g * ohw..(g + 1) * c_out_g * ohw];
            // Seed the output block with the bias, then accumulate the GEMM.
            for (o_local, chunk) in c.chunks_exact_mut(ohw).enumerate() {
                let b_val = weights.bias[g * c_out_g + o_local];
                chunk.fill(b_val);
            }
            T::gemm(c_out_g, row_len, ohw, T::one(), a, b, T::one(), c);
        }
    }
    Ok(out)
}

/// Accumulates weight and bias gradients from pre-built columns:
/// grad_kernels block += grad_output block (c_out_g x ohw) times the
/// transposed cols block; `grad_bias[o]` += sum of grad_output channel o.
pub fn weight_grads_from_cols<T: Scalar>(
    cols: &BatchCols<T>,
    weights: &ConvWeights<T>,
    grad_output: &FeatureTensor<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let row_len = weights.row_len();
    if cols.rows != row_len * weights.groups {
        return Err(Error::Config("column rows do not match kernel layout".into()));
    }
    if grad_output.shape() != (cols.n, weights.c_out, cols.oh, cols.ow) {
        return Err(Error::Config(format!(
            "grad_output shape {:?} does not match conv output ({}, {}, {}, {})",
            grad_output.shape(),
            cols.n,
            weights.c_out,
            cols.oh,
            cols.ow
        )));
    }
    let c_out_g = weights.c_out / weights.groups;
    let ohw = cols.ohw;
    let mut grad_kernels = vec![T::zero(); weights.kernels.len()];
    let mut grad_bias = vec![T::zero(); weights.c_out];
    for n in 0..cols.n {
        let sample_cols = cols.sample(n);
        let g_out = grad_output.sample(n);
        for g in 0..weights.groups {
            let a = &g_out[g * c_out_g * ohw..(g + 1) * c_out_g * ohw];
            let b = &sample_cols[g * row_len * ohw..(g + 1) * row_len * ohw];
            let c = &mut grad_kernels[g * c_out_g * row_len..(g + 1) * c_out_g * row_len];
            // a (c_out_g x ohw) . b^T (ohw x row_len), accumulating over samples.
            T::gemm_bt(c_out_g, ohw, row_len, T::one(), a, b, T::one(), c);
        }
        for o in 0..weights.c_out {
            let mut acc = T::zero();
            for &v in &g_out[o * ohw..(o + 1) * ohw] {
                acc = acc + v;
            }
            grad_bias[o] = grad_bias[o] + acc;
        }
    }
    Ok((grad_kernels, grad_bias))
}

/// Standard/grouped convolution forward pass.
pub fn conv2d_forward<T: Scalar>(
    input: &FeatureTensor<T>,
    weights: &ConvWeights<T>,
    stride: usize,
    padding: usize,
) -> Result<FeatureTensor<T>> {
    if input.c != weights.c_in() {
        return Err(Error::Config(format!(
            "input has {} channels but kernels expect {} ({} per group x {} groups)",
            input.c,
            weights.c_in(),
            weights.c_in_per_group,
            weights.groups
        )));
    }
    let cols = im2col_batch(input, weights.k, stride, padding)?;
    forward_from_cols(&cols, weights)
}

/// Weight/bias gradients for the layer-local loss. `grad_output` must have
/// the forward pass's output shape; gradients with respect to the input are
/// never produced (no gradient crosses a layer boundary).
pub fn conv2d_backward<T: Scalar>(
    input: &FeatureTensor<T>,
    weights: &ConvWeights<T>,
    grad_output: &FeatureTensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    if input.c != weights.c_in() {
        return Err(Error::Config(format!(
            "input has {} channels but kernels expect {}",
            input.c,
            weights.c_in()
        )));
    }
    let cols = im2col_batch(input, weights.k, stride, padding)?;
    weight_grads_from_cols(&cols, weights, grad_output)
}
