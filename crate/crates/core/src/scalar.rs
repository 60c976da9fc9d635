//! Floating-point abstraction over `f32` and `f64`.
//!
//! Training runs in `f32`. The gradient-check test suite instantiates the
//! same kernels at `f64` so that analytic gradients can be compared against
//! central finite differences at tolerances (1e-4 relative) that single
//! precision cannot reliably meet.

use num_traits::Float;

/// Scalar element type for tensors, losses, and optimizer state.
///
/// Extends [`num_traits::Float`] with a dense row-major matrix multiply so
/// the convolution kernels can dispatch to an optimized GEMM for either
/// precision.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    /// `c = alpha * a . b + beta * c` with row-major `a` (m x k),
    /// `b` (k x n), `c` (m x n).
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// As [`Scalar::gemm`] but with `b` interpreted as its transpose:
    /// `c = alpha * a . b^T + beta * c` with `a` (m x k) and `b` (n x k).
    fn gemm_bt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// As [`Scalar::gemm`] but with `a` interpreted as its transpose:
    /// `c = alpha * a^T . b + beta * c` with `a` (k x m) and `b` (k x n).
    fn gemm_at(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    /// Lossless-enough conversion from `f64` used for constants and
    /// hyperparameters.
    fn from_f64(v: f64) -> Self;

    /// Conversion into `f64` for metrics and logging.
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert_eq!(a.len(), m * k, "gemm: a has wrong length");
        assert_eq!(b.len(), k * n, "gemm: b has wrong length");
        assert_eq!(c.len(), m * n, "gemm: c has wrong length");
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        // Lengths are checked above; strides describe contiguous row-major
        // layouts, so every index the kernel touches is in bounds.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gemm_bt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert_eq!(a.len(), m * k, "gemm_bt: a has wrong length");
        assert_eq!(b.len(), n * k, "gemm_bt: b has wrong length");
        assert_eq!(c.len(), m * n, "gemm_bt: c has wrong length");
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                // b is (n x k) row-major; viewing it with row stride 1 and
                // column stride k yields its transpose (k x n).
                b.as_ptr(), 1, k as isize,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gemm_at(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert_eq!(a.len(), k * m, "gemm_at: a has wrong length");
        assert_eq!(b.len(), k * n, "gemm_at: b has wrong length");
        assert_eq!(c.len(), m * n, "gemm_at: c has wrong length");
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                // a is (k x m) row-major; viewing it with row stride 1 and
                // column stride m yields its transpose (m x k).
                a.as_ptr(), 1, m as isize,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert_eq!(a.len(), m * k, "gemm: a has wrong length");
        assert_eq!(b.len(), k * n, "gemm: b has wrong length");
        assert_eq!(c.len(), m * n, "gemm: c has wrong length");
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gemm_bt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert_eq!(a.len(), m * k, "gemm_bt: a has wrong length");
        assert_eq!(b.len(), n * k, "gemm_bt: b has wrong length");
        assert_eq!(c.len(), m * n, "gemm_bt: c has wrong length");
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), 1, k as isize,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gemm_at(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert_eq!(a.len(), k * m, "gemm_at: a has wrong length");
        assert_eq!(b.len(), k * n, "gemm_at: b has wrong length");
        assert_eq!(c.len(), m * n, "gemm_at: c has wrong length");
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), 1, m as isize,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn into_f64(self) -> f64 {
        self
    }
}
