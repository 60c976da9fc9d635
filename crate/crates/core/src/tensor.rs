//! Rank-4 feature tensor in NCHW layout.
//!
//! A single dense, row-major buffer backs every activation and gradient in
//! the crate. Indexing is explicit — `data[((n*C + c)*H + h)*W + w]` — which
//! keeps the hot loops free of abstraction and makes summation order
//! deterministic (a reproducibility requirement for training runs).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense (n, c, h, w) tensor of activations, inputs, or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor<T = f32> {
    pub data: Vec<T>,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> FeatureTensor<T> {
    /// Wraps an existing buffer, validating that the shape is non-degenerate
    /// and accounts for every element.
    pub fn new(data: Vec<T>, n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "tensor dimensions must all be >= 1, got ({n}, {c}, {h}, {w})"
            )));
        }
        if data.len() != n * c * h * w {
            return Err(Error::Config(format!(
                "tensor data length {} does not match shape ({n}, {c}, {h}, {w}) = {}",
                data.len(),
                n * c * h * w
            )));
        }
        Ok(Self { data, n, c, h, w })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        assert!(n >= 1 && c >= 1 && h >= 1 && w >= 1, "degenerate tensor shape");
        Self { data: vec![T::zero(); n * c * h * w], n, c, h, w }
    }

    /// Shape tuple (n, c, h, w).
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    /// Tensor filled with independent uniform draws from [lo, hi).
    pub fn random_uniform<R: rand::Rng>(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let mut t = Self::zeros(n, c, h, w);
        for v in t.data.iter_mut() {
            *v = T::from_f64(rng.gen_range(lo..hi));
        }
        t
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat offset of element (n, c, h, w).
    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.idx(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous slice holding sample `n` (all channels, rows, cols).
    pub fn sample(&self, n: usize) -> &[T] {
        let stride = self.c * self.h * self.w;
        &self.data[n * stride..(n + 1) * stride]
    }

    /// Mutable slice holding sample `n`.
    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let stride = self.c * self.h * self.w;
        &mut self.data[n * stride..(n + 1) * stride]
    }

    /// True when every element is finite (no NaN / infinity).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, used by the gradient-check suite to lift
    /// `f32` fixtures into `f64`.
    pub fn cast<U: Scalar>(&self) -> FeatureTensor<U> {
        FeatureTensor {
            data: self.data.iter().map(|v| U::from_f64(v.into_f64())).collect(),
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
        }
    }
}

/// Elementwise max(0, x).
pub fn relu<T: Scalar>(input: &FeatureTensor<T>) -> FeatureTensor<T> {
    let zero = T::zero();
    FeatureTensor {
        data: input.data.iter().map(|&v| if v > zero { v } else { zero }).collect(),
        n: input.n,
        c: input.c,
        h: input.h,
        w: input.w,
    }
}

/// Backward pass of ReLU: grad * indicator(x > 0).
///
/// The subgradient at exactly x = 0 is fixed to 0.
pub fn relu_backward<T: Scalar>(
    input: &FeatureTensor<T>,
    grad_output: &FeatureTensor<T>,
) -> Result<FeatureTensor<T>> {
    if input.shape() != grad_output.shape() {
        return Err(Error::Config(format!(
            "relu_backward shape mismatch: input {:?} vs grad {:?}",
            input.shape(),
            grad_output.shape()
        )));
    }
    let zero = T::zero();
    let data = input
        .data
        .iter()
        .zip(grad_output.data.iter())
        .map(|(&x, &g)| if x > zero { g } else { zero })
        .collect();
    Ok(FeatureTensor { data, n: input.n, c: input.c, h: input.h, w: input.w })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let r = FeatureTensor::<f32>::new(vec![0.0; 5], 1, 2, 3, 1);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn new_rejects_zero_dimension() {
        let r = FeatureTensor::<f32>::new(vec![], 0, 1, 1, 1);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn indexing_is_row_major_nchw() {
        let mut t = FeatureTensor::<f32>::zeros(2, 3, 4, 5);
        t.set(1, 2, 3, 4, 7.0);
        // Last element of the buffer is (n-1, c-1, h-1, w-1).
        assert_eq!(t.data[2 * 3 * 4 * 5 - 1], 7.0);
        assert_eq!(t.at(1, 2, 3, 4), 7.0);
    }

    #[test]
    fn relu_clamps_negatives_to_zero() {
        let t = FeatureTensor::new(vec![-1.0f32, 0.0, 2.0], 1, 3, 1, 1).unwrap();
        let out = relu(&t);
        assert_eq!(out.data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_backward_masks_by_input_sign() {
        let x = FeatureTensor::new(vec![-1.0f32, 0.0, 2.0], 1, 3, 1, 1).unwrap();
        let g = FeatureTensor::new(vec![5.0f32, 5.0, 5.0], 1, 3, 1, 1).unwrap();
        let out = relu_backward(&x, &g).unwrap();
        // Negative input and the x = 0 convention both gate the gradient to 0.
        assert_eq!(out.data, vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn relu_backward_rejects_shape_mismatch() {
        let x = FeatureTensor::<f32>::zeros(1, 1, 1, 1);
        let g = FeatureTensor::<f32>::zeros(1, 1, 1, 2);
        assert!(relu_backward(&x, &g).is_err());
    }

    #[test]
    fn all_finite_detects_nan() {
        let mut t = FeatureTensor::<f32>::zeros(1, 1, 1, 3);
        assert!(t.all_finite());
        t.data[1] = f32::NAN;
        assert!(!t.all_finite());
    }

    #[test]
    fn cast_round_trips_values() {
        let t = FeatureTensor::new(vec![0.5f32, -1.25, 3.0], 1, 3, 1, 1).unwrap();
        let d: FeatureTensor<f64> = t.cast();
        assert_eq!(d.data, vec![0.5f64, -1.25, 3.0]);
    }
}
