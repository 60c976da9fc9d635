//! Goodness scores and the two layer-local loss functions.
//!
//! Each convolutional layer's ReLU output is scored per class: channels are
//! split into J contiguous subsets of S = C/J channels, and class j's
//! goodness for sample n is the mean of squared activations over its subset,
//!
//! ```text
//! G[n, j] = (1 / (S*H*W)) * sum_{s,h,w} a[n, j*S + s, h, w]^2
//! ```
//!
//! Two losses turn these scores into a training signal. The PvN loss pushes
//! the target class's goodness above a threshold theta and the mean
//! non-target goodness below it. The CwC loss treats the per-class goodness
//! row as softmax logits, making the layer a standalone classifier. Both
//! provide analytic gradients with respect to the activations — the only
//! gradient a locally-trained layer ever needs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::FeatureTensor;

/// Per-sample, per-class goodness scores (all entries are means of squares,
/// hence >= 0).
#[derive(Debug, Clone, PartialEq)]
pub struct GoodnessMatrix<T = f32> {
    pub values: Vec<T>,
    pub n: usize,
    pub j: usize,
}

impl<T: Scalar> GoodnessMatrix<T> {
    #[inline]
    pub fn at(&self, n: usize, j: usize) -> T {
        self.values[n * self.j + j]
    }

    /// Row for sample n.
    pub fn row(&self, n: usize) -> &[T] {
        &self.values[n * self.j..(n + 1) * self.j]
    }

    /// Argmax class (1-based) of each row, ties broken by lowest index.
    pub fn argmax_classes(&self) -> Vec<usize> {
        (0..self.n)
            .map(|n| {
                let row = self.row(n);
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best + 1
            })
            .collect()
    }
}

/// One-hot label mask over a batch; targets are 1-based class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub values: Vec<u8>,
    pub targets: Vec<usize>,
    pub j: usize,
}

impl LabelMask {
    /// Builds the mask from 1-based targets; each row has exactly one 1.
    pub fn new(targets: &[usize], j: usize) -> Result<Self> {
        let mut values = vec![0u8; targets.len() * j];
        for (n, &z) in targets.iter().enumerate() {
            if z == 0 || z > j {
                return Err(Error::Config(format!(
                    "target {z} for sample {n} outside 1..={j}"
                )));
            }
            values[n * j + (z - 1)] = 1;
        }
        Ok(Self { values, targets: targets.to_vec(), j })
    }

    pub fn n(&self) -> usize {
        self.targets.len()
    }
}

/// Loss value, activation gradient, and the goodness matrix (retained for
/// layer-accuracy metrics).
#[derive(Debug, Clone)]
pub struct LossOutput<T = f32> {
    pub loss: T,
    pub grad_activations: FeatureTensor<T>,
    pub goodness: GoodnessMatrix<T>,
}

/// Computes the goodness matrix of `activations` split into `j_classes`
/// contiguous channel subsets.
pub fn compute_goodness<T: Scalar>(
    activations: &FeatureTensor<T>,
    j_classes: usize,
) -> Result<GoodnessMatrix<T>> {
    if j_classes == 0 || activations.c % j_classes != 0 {
        return Err(Error::Config(format!(
            "channel count {} not divisible by class count {j_classes}",
            activations.c
        )));
    }
    let s = activations.c / j_classes;
    let plane = activations.h * activations.w;
    let norm = T::from_f64(1.0 / (s * plane) as f64);
    let mut values = vec![T::zero(); activations.n * j_classes];
    for n in 0..activations.n {
        let sample = activations.sample(n);
        for j in 0..j_classes {
            let mut acc = T::zero();
            // Fixed ascending order over (s, h, w) keeps sums reproducible.
            for &v in &sample[j * s * plane..(j + 1) * s * plane] {
                acc = acc + v * v;
            }
            values[n * j_classes + j] = acc * norm;
        }
    }
    Ok(GoodnessMatrix { values, n: activations.n, j: j_classes })
}

/// Positive goodness: the target class's score per sample, `g+[n] = G[n, z_n]`.
pub fn positive_goodness<T: Scalar>(g: &GoodnessMatrix<T>, mask: &LabelMask) -> Result<Vec<T>> {
    if g.n != mask.n() || g.j != mask.j {
        return Err(Error::Config(format!(
            "goodness ({}, {}) and mask ({}, {}) disagree",
            g.n,
            g.j,
            mask.n(),
            mask.j
        )));
    }
    Ok(mask
        .targets
        .iter()
        .enumerate()
        .map(|(n, &z)| g.at(n, z - 1))
        .collect())
}

/// Negative goodness: the summed scores of every non-target class,
/// `g-[n] = sum_{j != z_n} G[n, j]`, accumulated in ascending j order.
///
/// The partition identity g+ + g- = row total holds bitwise when the row
/// total is accumulated in the same order (non-target terms ascending, then
/// the target term last); IEEE addition is commutative, so `g+ + g-` equals
/// that sum exactly.
pub fn negative_goodness<T: Scalar>(g: &GoodnessMatrix<T>, mask: &LabelMask) -> Result<Vec<T>> {
    if g.n != mask.n() || g.j != mask.j {
        return Err(Error::Config(format!(
            "goodness ({}, {}) and mask ({}, {}) disagree",
            g.n,
            g.j,
            mask.n(),
            mask.j
        )));
    }
    Ok(mask
        .targets
        .iter()
        .enumerate()
        .map(|(n, &z)| {
            let row = g.row(n);
            let mut acc = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if j != z - 1 {
                    acc = acc + v;
                }
            }
            acc
        })
        .collect())
}

/// Numerically stable log(1 + exp(x)).
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    let zero = T::zero();
    if x > zero {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid evaluated stably for large |x|.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

fn check_inputs<T: Scalar>(
    activations: &FeatureTensor<T>,
    targets: &[usize],
    j_classes: usize,
) -> Result<()> {
    if targets.is_empty() || activations.n == 0 {
        return Err(Error::Config("loss needs a nonempty batch".into()));
    }
    if targets.len() != activations.n {
        return Err(Error::Config(format!(
            "batch has {} samples but {} targets",
            activations.n,
            targets.len()
        )));
    }
    if j_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {j_classes}")));
    }
    if !activations.all_finite() {
        return Err(Error::Numerical("non-finite activation entering loss".into()));
    }
    Ok(())
}

/// Spreads a per-(sample, class) goodness gradient back to the activations
/// through the mean-of-squares: d g / d a = 2 a / (S*H*W).
fn chain_to_activations<T: Scalar>(
    activations: &FeatureTensor<T>,
    grad_g: &[T],
    j_classes: usize,
) -> FeatureTensor<T> {
    let s = activations.c / j_classes;
    let plane = activations.h * activations.w;
    let norm = T::from_f64(2.0 / (s * plane) as f64);
    let mut grad = FeatureTensor::zeros(activations.n, activations.c, activations.h, activations.w);
    for n in 0..activations.n {
        let src = activations.sample(n);
        let dst = grad.sample_mut(n);
        for j in 0..j_classes {
            let coeff = grad_g[n * j_classes + j] * norm;
            let lo = j * s * plane;
            let hi = (j + 1) * s * plane;
            for i in lo..hi {
                dst[i] = coeff * src[i];
            }
        }
    }
    grad
}

/// PvN loss:
///
/// ```text
/// L = (1/2N) * sum_n [ log(1 + exp(-g+_n + theta))
///                    + log(1 + exp(g-_n/(J-1) - theta)) ]
/// ```
///
/// with gradients routed through the goodness definition back to the
/// activations.
pub fn loss_pvn<T: Scalar>(
    activations: &FeatureTensor<T>,
    targets: &[usize],
    theta: T,
    j_classes: usize,
) -> Result<LossOutput<T>> {
    if theta <= T::zero() {
        return Err(Error::Config(format!("theta must be positive, got {theta}")));
    }
    check_inputs(activations, targets, j_classes)?;
    let g = compute_goodness(activations, j_classes)?;
    let mask = LabelMask::new(targets, j_classes)?;
    let gp = positive_goodness(&g, &mask)?;
    let gn = negative_goodness(&g, &mask)?;

    let n = activations.n;
    let n_t = T::from_f64(n as f64);
    let jm1 = T::from_f64((j_classes - 1) as f64);
    let half = T::from_f64(0.5);
    let two_n = T::from_f64(2.0) * n_t;

    let mut loss = T::zero();
    let mut grad_g = vec![T::zero(); n * j_classes];
    for i in 0..n {
        let pos_arg = -gp[i] + theta;
        let neg_arg = gn[i] / jm1 - theta;
        loss = loss + softplus(pos_arg) + softplus(neg_arg);
        // d softplus(u)/du = sigmoid(u); signs follow the arguments.
        let d_pos = -sigmoid(pos_arg) / two_n;
        let d_neg = sigmoid(neg_arg) / (jm1 * two_n);
        let z = mask.targets[i] - 1;
        for j in 0..j_classes {
            grad_g[i * j_classes + j] = if j == z { d_pos } else { d_neg };
        }
    }
    loss = loss * half / n_t;
    let grad_activations = chain_to_activations(activations, &grad_g, j_classes);
    Ok(LossOutput { loss, grad_activations, goodness: g })
}

/// CwC loss: softmax cross-entropy with the per-class goodness row as
/// logits,
///
/// ```text
/// L = -(1/N) * sum_n log( exp(g+_n) / sum_j exp(G[n, j]) )
/// ```
///
/// computed with max-subtraction; gradient with respect to G is
/// (softmax(G) - onehot) / N, then routed back to the activations.
pub fn loss_cwc<T: Scalar>(
    activations: &FeatureTensor<T>,
    targets: &[usize],
    j_classes: usize,
) -> Result<LossOutput<T>> {
    check_inputs(activations, targets, j_classes)?;
    let g = compute_goodness(activations, j_classes)?;
    let mask = LabelMask::new(targets, j_classes)?;

    let n = activations.n;
    let n_t = T::from_f64(n as f64);
    let mut loss = T::zero();
    let mut grad_g = vec![T::zero(); n * j_classes];
    for i in 0..n {
        let row = g.row(i);
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut denom = T::zero();
        for &v in row {
            denom = denom + (v - max).exp();
        }
        let log_denom = denom.ln();
        let z = mask.targets[i] - 1;
        loss = loss - ((row[z] - max) - log_denom);
        for j in 0..j_classes {
            let p = (row[j] - max).exp() / denom;
            let y = if j == z { T::one() } else { T::zero() };
            grad_g[i * j_classes + j] = (p - y) / n_t;
        }
    }
    loss = loss / n_t;
    let grad_activations = chain_to_activations(activations, &grad_g, j_classes);
    Ok(LossOutput { loss, grad_activations, goodness: g })
}
