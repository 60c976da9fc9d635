//! Classification heads on top of the trained stack: a linear softmax
//! classifier and a label-overlay goodness scorer, both reading the
//! flattened final block output, plus the training-free global-averaging
//! rule, which reads the last layer's ReLU tap.
//!
//! Heads consume detached features — no gradient ever flows back into the
//! backbone, so none of the training steps here computes an input
//! gradient.

use crate::adam::{adam_step, AdamState};
use crate::error::{Error, Result};
use crate::goodness::{compute_goodness, sigmoid, softplus};
use crate::scalar::Scalar;
use crate::tensor::FeatureTensor;
use rand::Rng;

/// Width of each dense layer in the goodness head.
pub const HIDDEN_WIDTH: usize = 1024;

/// Guard added to the vector norm when normalizing hidden vectors, so a
/// silent (all-zero) hidden state passes through as zeros.
const NORM_EPS: f64 = 1e-8;

/// One sample's classification: `class` is 1-based and equals the argmax
/// of `scores` with ties broken toward the lowest index.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T = f32> {
    pub class: usize,
    pub scores: Vec<T>,
}

/// 0-based argmax with ties broken toward the lowest index.
fn argmax_lowest<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Validates a flattened (n x d) feature matrix and returns n.
fn feature_rows(len: usize, d: usize, expected_d: usize) -> Result<usize> {
    if d != expected_d {
        return Err(Error::Config(format!(
            "head expects {expected_d}-dimensional features, got {d}"
        )));
    }
    if d == 0 || len % d != 0 || len == 0 {
        return Err(Error::Config(format!(
            "feature buffer of length {len} is not a whole number of {d}-dimensional rows"
        )));
    }
    Ok(len / d)
}

/// Validates 1-based targets against a batch of n samples.
fn check_targets(targets: &[usize], n: usize, j: usize) -> Result<()> {
    if targets.len() != n {
        return Err(Error::Config(format!(
            "{} targets for a batch of {n} samples",
            targets.len()
        )));
    }
    for &z in targets {
        if z < 1 || z > j {
            return Err(Error::Config(format!(
                "target {z} outside the 1..={j} class range"
            )));
        }
    }
    Ok(())
}

/// Linear classifier on the flattened features, trained with softmax
/// cross-entropy on the raw logits.
#[derive(Debug, Clone)]
pub struct SoftmaxHead<T = f32> {
    /// (d x j) row-major weight matrix.
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub d: usize,
    pub j: usize,
    pub adam_w: AdamState<T>,
    pub adam_b: AdamState<T>,
}

impl<T: Scalar> SoftmaxHead<T> {
    /// Zero-initialized head: every class starts with identical (uniform)
    /// probabilities, so the initial loss is exactly ln J.
    pub fn new(d: usize, j: usize, lr: T) -> Self {
        assert!(d >= 1 && j >= 2, "softmax head needs d >= 1 and j >= 2");
        Self {
            w: vec![T::zero(); d * j],
            b: vec![T::zero(); j],
            d,
            j,
            adam_w: AdamState::new(d * j, lr),
            adam_b: AdamState::new(j, lr),
        }
    }

    /// Raw logits for n samples: X·W + b, row-major (n x j).
    fn logits(&self, features: &[T], n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(n * self.j);
        for _ in 0..n {
            out.extend_from_slice(&self.b);
        }
        T::gemm(n, self.d, self.j, T::one(), features, &self.w, T::one(), &mut out);
        out
    }

    /// Predicted class per sample; scores are the raw logits.
    pub fn predict(&self, features: &[T], d: usize) -> Result<Vec<Prediction<T>>> {
        let n = feature_rows(features.len(), d, self.d)?;
        let logits = self.logits(features, n);
        Ok((0..n)
            .map(|i| {
                let row = &logits[i * self.j..(i + 1) * self.j];
                Prediction { class: argmax_lowest(row) + 1, scores: row.to_vec() }
            })
            .collect())
    }

    /// One Adam step on the batch cross-entropy; returns the mean loss.
    pub fn train_step(&mut self, features: &[T], d: usize, targets: &[usize]) -> Result<T> {
        let n = feature_rows(features.len(), d, self.d)?;
        check_targets(targets, n, self.j)?;
        let mut logits = self.logits(features, n);
        // In-place: logits become d(loss)/d(logits) = (softmax - onehot)/n.
        let loss = softmax_ce_grads(&mut logits, targets, n, self.j)?;
        let mut dw = vec![T::zero(); self.d * self.j];
        T::gemm_at(self.d, n, self.j, T::one(), features, &logits, T::zero(), &mut dw);
        let mut db = vec![T::zero(); self.j];
        for i in 0..n {
            for (acc, g) in db.iter_mut().zip(&logits[i * self.j..(i + 1) * self.j]) {
                *acc = *acc + *g;
            }
        }
        adam_step(&mut self.w, &dw, &mut self.adam_w)?;
        adam_step(&mut self.b, &db, &mut self.adam_b)?;
        Ok(loss)
    }
}

/// Mean cross-entropy over the batch; `logits` is overwritten with the
/// gradient (softmax − onehot)/n. Max-subtraction keeps the exponentials
/// bounded.
fn softmax_ce_grads<T: Scalar>(
    logits: &mut [T],
    targets: &[usize],
    n: usize,
    j: usize,
) -> Result<T> {
    let mut loss = T::zero();
    let inv_n = T::one() / T::from_f64(n as f64);
    for i in 0..n {
        let row = &mut logits[i * j..(i + 1) * j];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        if !max.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite logit in sample {i} of the softmax head"
            )));
        }
        let target = targets[i] - 1;
        // -log p computed as log-sum-exp minus the shifted target logit;
        // taking the log of the exponentiated probability instead would
        // underflow to -inf once the target sits ~90 logits below the max.
        let target_shift = row[target] - max;
        let mut denom = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom = denom + *v;
        }
        loss = loss + (denom.ln() - target_shift);
        for (c, v) in row.iter_mut().enumerate() {
            let p = *v / denom;
            let y = if c == target { T::one() } else { T::zero() };
            *v = (p - y) * inv_n;
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::Numerical("softmax cross-entropy diverged".into()));
    }
    Ok(loss)
}

/// One dense layer of the goodness head with its Adam state.
#[derive(Debug, Clone)]
pub struct DenseLayer<T = f32> {
    /// (in_dim x out_dim) row-major.
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub adam_w: AdamState<T>,
    pub adam_b: AdamState<T>,
}

impl<T: Scalar> DenseLayer<T> {
    fn he_uniform<R: Rng>(in_dim: usize, out_dim: usize, lr: T, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            w,
            b: vec![T::zero(); out_dim],
            in_dim,
            out_dim,
            adam_w: AdamState::new(in_dim * out_dim, lr),
            adam_b: AdamState::new(out_dim, lr),
        }
    }

    /// ReLU(X·W + b) for m rows.
    fn forward(&self, x: &[T], m: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), m * self.in_dim);
        let mut h = Vec::with_capacity(m * self.out_dim);
        for _ in 0..m {
            h.extend_from_slice(&self.b);
        }
        T::gemm(m, self.in_dim, self.out_dim, T::one(), x, &self.w, T::one(), &mut h);
        for v in h.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        h
    }

    /// Weight/bias gradients from the layer input and d(loss)/d(pre-act),
    /// followed by one Adam step.
    fn update(&mut self, x: &[T], da: &[T], m: usize) -> Result<()> {
        let mut dw = vec![T::zero(); self.in_dim * self.out_dim];
        T::gemm_at(self.in_dim, m, self.out_dim, T::one(), x, da, T::zero(), &mut dw);
        let mut db = vec![T::zero(); self.out_dim];
        for i in 0..m {
            for (acc, g) in db.iter_mut().zip(&da[i * self.out_dim..(i + 1) * self.out_dim]) {
                *acc = *acc + *g;
            }
        }
        adam_step(&mut self.w, &dw, &mut self.adam_w)?;
        adam_step(&mut self.b, &db, &mut self.adam_b)
    }
}

/// Mean squared activation per row of an (m x k) matrix.
fn goodness_of_rows<T: Scalar>(h: &[T], m: usize, k: usize) -> Vec<T> {
    let inv_k = T::one() / T::from_f64(k as f64);
    (0..m)
        .map(|i| {
            let mut s = T::zero();
            for v in &h[i * k..(i + 1) * k] {
                s = s + *v * *v;
            }
            s * inv_k
        })
        .collect()
}

/// Per-row L2 normalization with an epsilon guard, producing the detached
/// input handed to the next dense layer.
fn normalize_rows<T: Scalar>(h: &[T], m: usize, k: usize) -> Vec<T> {
    let eps = T::from_f64(NORM_EPS);
    let mut out = h.to_vec();
    for i in 0..m {
        let row = &mut out[i * k..(i + 1) * k];
        let mut sq = T::zero();
        for v in row.iter() {
            sq = sq + *v * *v;
        }
        let inv = T::one() / (sq.sqrt() + eps);
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    out
}

/// Local threshold loss on one dense layer's hidden matrix, where the
/// first `pairs` rows carry the true label overlay and the next `pairs`
/// rows a wrong one. Per pair the loss is
/// `log(1 + exp(-(g_pos - theta))) + log(1 + exp(g_neg - theta))` with
/// g = mean of squared activations; the mean over pairs is returned
/// together with d(loss)/d(pre-activation).
fn layer_local_grads<T: Scalar>(
    h: &[T],
    pairs: usize,
    k: usize,
    theta: T,
) -> (T, Vec<T>) {
    let m = 2 * pairs;
    let g = goodness_of_rows(h, m, k);
    let inv_pairs = T::from_f64(1.0 / pairs as f64);
    let mut loss = T::zero();
    let mut dg = vec![T::zero(); m];
    for i in 0..pairs {
        loss = loss + softplus(theta - g[i]) + softplus(g[pairs + i] - theta);
        dg[i] = -sigmoid(theta - g[i]) * inv_pairs;
        dg[pairs + i] = sigmoid(g[pairs + i] - theta) * inv_pairs;
    }
    // H = ReLU(A) vanishes exactly where A <= 0, so dA = dg * 2H/k
    // already carries the ReLU mask.
    let two_over_k = T::from_f64(2.0 / k as f64);
    let mut da = vec![T::zero(); m * k];
    for i in 0..m {
        let scale = dg[i] * two_over_k;
        for (dst, v) in da[i * k..(i + 1) * k].iter_mut().zip(&h[i * k..(i + 1) * k]) {
            *dst = scale * *v;
        }
    }
    (loss * inv_pairs, da)
}

/// Two dense layers scored by goodness under each candidate label overlay.
/// The flattened features are length-normalized per row, then the one-hot
/// label (magnitude 1.0) occupies J slots appended after them — feature
/// magnitude carries no class information into the first layer, and the
/// overlay keeps a fixed share of the input energy regardless of feature
/// scale. Each layer trains on its own local threshold loss, and the
/// hidden vector is length-normalized again before feeding the next layer.
#[derive(Debug, Clone)]
pub struct GoodnessHead<T = f32> {
    pub l1: DenseLayer<T>,
    pub l2: DenseLayer<T>,
    pub theta: T,
    pub d: usize,
    pub j: usize,
}

impl<T: Scalar> GoodnessHead<T> {
    /// He-uniform head over `d` features and `j` classes with the default
    /// hidden width.
    pub fn new<R: Rng>(d: usize, j: usize, lr: T, rng: &mut R) -> Result<Self> {
        Self::with_hidden(d, j, HIDDEN_WIDTH, lr, rng)
    }

    /// As [`GoodnessHead::new`] with an explicit hidden width (tests use
    /// small widths to keep finite-difference suites fast).
    pub fn with_hidden<R: Rng>(
        d: usize,
        j: usize,
        hidden: usize,
        lr: T,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || j < 2 || hidden == 0 {
            return Err(Error::Config(format!(
                "goodness head needs d >= 1, j >= 2, hidden >= 1; got d={d}, j={j}, hidden={hidden}"
            )));
        }
        Ok(Self {
            l1: DenseLayer::he_uniform(d + j, hidden, lr, rng),
            l2: DenseLayer::he_uniform(hidden, hidden, lr, rng),
            theta: T::from_f64(2.0),
            d,
            j,
        })
    }

    /// Writes `features` rows with a one-hot label appended. `labels` is
    /// per-row, 1-based.
    fn overlay(&self, features: &[T], n: usize, labels: &[usize], out: &mut Vec<T>) {
        let din = self.d + self.j;
        for i in 0..n {
            let base = out.len();
            out.extend_from_slice(&features[i * self.d..(i + 1) * self.d]);
            out.resize(base + din, T::zero());
            out[base + self.d + labels[i] - 1] = T::one();
        }
    }

    /// One Adam step per dense layer on the paired positive/negative local
    /// losses; returns the summed layer losses. `rng` draws each sample's
    /// wrong label uniformly from the J−1 alternatives.
    pub fn train_step<R: Rng>(
        &mut self,
        features: &[T],
        d: usize,
        targets: &[usize],
        rng: &mut R,
    ) -> Result<T> {
        let n = feature_rows(features.len(), d, self.d)?;
        check_targets(targets, n, self.j)?;
        let wrong: Vec<usize> = targets
            .iter()
            .map(|&z| {
                let r = rng.gen_range(1..self.j);
                if r >= z {
                    r + 1
                } else {
                    r
                }
            })
            .collect();
        // Positive rows first, matched negative rows after. The feature
        // block is normalized before the overlay lands so the label slot
        // keeps its full magnitude.
        let unit = normalize_rows(features, n, self.d);
        let m = 2 * n;
        let mut x = Vec::with_capacity(m * (self.d + self.j));
        self.overlay(&unit, n, targets, &mut x);
        self.overlay(&unit, n, &wrong, &mut x);

        let h1 = self.l1.forward(&x, m);
        let (loss1, da1) = layer_local_grads(&h1, n, self.l1.out_dim, self.theta);
        if !loss1.is_finite() {
            return Err(Error::Numerical("goodness head layer 1 loss diverged".into()));
        }
        self.l1.update(&x, &da1, m)?;

        // The second layer consumes the normalized first-layer output as a
        // constant — its local loss never reaches layer 1's weights.
        let x2 = normalize_rows(&h1, m, self.l1.out_dim);
        let h2 = self.l2.forward(&x2, m);
        let (loss2, da2) = layer_local_grads(&h2, n, self.l2.out_dim, self.theta);
        if !loss2.is_finite() {
            return Err(Error::Numerical("goodness head layer 2 loss diverged".into()));
        }
        self.l2.update(&x2, &da2, m)?;
        Ok(loss1 + loss2)
    }

    /// Scores every candidate label by overlaying it, running both layers,
    /// and summing their goodness — J forward passes per sample.
    pub fn predict(&self, features: &[T], d: usize) -> Result<Vec<Prediction<T>>> {
        let n = feature_rows(features.len(), d, self.d)?;
        let unit = normalize_rows(features, n, self.d);
        let mut scores = vec![T::zero(); n * self.j];
        for label in 1..=self.j {
            let labels = vec![label; n];
            let mut x = Vec::with_capacity(n * (self.d + self.j));
            self.overlay(&unit, n, &labels, &mut x);
            let h1 = self.l1.forward(&x, n);
            let g1 = goodness_of_rows(&h1, n, self.l1.out_dim);
            let x2 = normalize_rows(&h1, n, self.l1.out_dim);
            let h2 = self.l2.forward(&x2, n);
            let g2 = goodness_of_rows(&h2, n, self.l2.out_dim);
            for i in 0..n {
                scores[i * self.j + label - 1] = g1[i] + g2[i];
            }
        }
        Ok((0..n)
            .map(|i| {
                let row = &scores[i * self.j..(i + 1) * self.j];
                Prediction { class: argmax_lowest(row) + 1, scores: row.to_vec() }
            })
            .collect())
    }
}

/// Training-free prediction from a feature map: each class is scored by
/// the mean squared activation over its channel subset — the same
/// per-class goodness the local losses use — and the argmax wins.
/// Evaluation hands this the last layer's ReLU tap, so the readout scores
/// exactly the goodness that layer was trained to separate.
pub fn ga_predict<T: Scalar>(
    output: &FeatureTensor<T>,
    classes: usize,
) -> Result<Vec<Prediction<T>>> {
    let g = compute_goodness(output, classes)?;
    let winners = g.argmax_classes();
    Ok(winners
        .into_iter()
        .enumerate()
        .map(|(i, class)| Prediction { class, scores: g.row(i).to_vec() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_initialized_softmax_loss_is_ln_j() {
        for j in [3usize, 10] {
            let mut head = SoftmaxHead::<f64>::new(5, j, 0.01);
            let features = vec![0.3; 2 * 5];
            let targets = vec![1, j];
            let loss = head.train_step(&features, 5, &targets).unwrap();
            assert!(
                (loss - (j as f64).ln()).abs() < 1e-12,
                "initial loss {loss} vs ln {j}"
            );
        }
    }

    #[test]
    fn softmax_overfits_a_single_example_monotonically() {
        let mut head = SoftmaxHead::<f32>::new(4, 3, 0.01);
        let features = vec![0.5, -1.0, 2.0, 0.25];
        let targets = vec![2];
        let mut losses = Vec::new();
        for _ in 0..600 {
            losses.push(head.train_step(&features, 4, &targets).unwrap());
        }
        let warmup = 10;
        for w in losses[warmup..].windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "loss rose after warmup: {w:?}");
        }
        assert!(
            *losses.last().unwrap() < 0.01,
            "final loss {}",
            losses.last().unwrap()
        );
        assert_eq!(head.predict(&features, 4).unwrap()[0].class, 2);
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, d, j) = (3usize, 7usize, 4usize);
        let features: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets = vec![2, 4, 1];
        let w0: Vec<f64> = (0..d * j).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b0: Vec<f64> = (0..j).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let loss_at = |w: &[f64], b: &[f64]| -> f64 {
            let mut logits = Vec::with_capacity(n * j);
            for _ in 0..n {
                logits.extend_from_slice(b);
            }
            f64::gemm(n, d, j, 1.0, &features, w, 1.0, &mut logits);
            softmax_ce_grads(&mut logits, &targets, n, j).unwrap()
        };

        // Analytic gradients via the same path train_step uses.
        let mut logits = Vec::with_capacity(n * j);
        for _ in 0..n {
            logits.extend_from_slice(&b0);
        }
        f64::gemm(n, d, j, 1.0, &features, &w0, 1.0, &mut logits);
        softmax_ce_grads(&mut logits, &targets, n, j).unwrap();
        let mut dw = vec![0.0; d * j];
        f64::gemm_at(d, n, j, 1.0, &features, &logits, 0.0, &mut dw);
        let mut db = vec![0.0; j];
        for i in 0..n {
            for (acc, g) in db.iter_mut().zip(&logits[i * j..(i + 1) * j]) {
                *acc += *g;
            }
        }

        let step = 1e-6;
        for idx in 0..d * j {
            let mut wp = w0.clone();
            let mut wm = w0.clone();
            wp[idx] += step;
            wm[idx] -= step;
            let numeric = (loss_at(&wp, &b0) - loss_at(&wm, &b0)) / (2.0 * step);
            let denom = numeric.abs().max(dw[idx].abs()).max(1e-8);
            assert!(
                (numeric - dw[idx]).abs() / denom < 1e-4,
                "dw[{idx}]: analytic {} vs numeric {numeric}",
                dw[idx]
            );
        }
        for idx in 0..j {
            let mut bp = b0.clone();
            let mut bm = b0.clone();
            bp[idx] += step;
            bm[idx] -= step;
            let numeric = (loss_at(&w0, &bp) - loss_at(&w0, &bm)) / (2.0 * step);
            let denom = numeric.abs().max(db[idx].abs()).max(1e-8);
            assert!((numeric - db[idx]).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn softmax_prediction_ignores_constant_logit_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = SoftmaxHead::<f32>::new(6, 5, 0.01);
        for v in head.w.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let features: Vec<f32> = (0..4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let before: Vec<usize> = head
            .predict(&features, 6)
            .unwrap()
            .into_iter()
            .map(|p| p.class)
            .collect();
        for v in head.b.iter_mut() {
            *v = *v + 17.5;
        }
        let after: Vec<usize> = head
            .predict(&features, 6)
            .unwrap()
            .into_iter()
            .map(|p| p.class)
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn local_loss_at_threshold_is_log_2_per_term() {
        // One hidden unit, one pair; h chosen so g = h^2 = theta exactly.
        let theta = 2.0f64;
        let h = vec![theta.sqrt(), theta.sqrt()];
        let (loss, _) = layer_local_grads(&h, 1, 1, theta);
        assert!((loss - 2.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_features_and_weights_give_positive_term_loss() {
        // g = 0 on both rows: loss = log(1+e^theta) + log(1+e^-theta).
        let theta = 2.0f64;
        let h = vec![0.0, 0.0];
        let (loss, da) = layer_local_grads(&h, 1, 1, theta);
        let expect = (1.0 + theta.exp()).ln() + (1.0 + (-theta).exp()).ln();
        assert!((loss - expect).abs() < 1e-12);
        // Zero activations kill the chain rule exactly.
        assert!(da.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_layer_local_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (pairs, in_dim, out_dim) = (3usize, 6usize, 5usize);
        let m = 2 * pairs;
        let theta = 2.0f64;
        let x: Vec<f64> = (0..m * in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let b0: Vec<f64> = (0..out_dim).map(|_| rng.gen_range(-0.3..0.3)).collect();

        let loss_at = |w: &[f64], b: &[f64]| -> f64 {
            let mut h = Vec::with_capacity(m * out_dim);
            for _ in 0..m {
                h.extend_from_slice(b);
            }
            f64::gemm(m, in_dim, out_dim, 1.0, &x, w, 1.0, &mut h);
            for v in h.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            layer_local_grads(&h, pairs, out_dim, theta).0
        };

        let mut h = Vec::with_capacity(m * out_dim);
        for _ in 0..m {
            h.extend_from_slice(&b0);
        }
        f64::gemm(m, in_dim, out_dim, 1.0, &x, &w0, 1.0, &mut h);
        for v in h.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let (_, da) = layer_local_grads(&h, pairs, out_dim, theta);
        let mut dw = vec![0.0; in_dim * out_dim];
        f64::gemm_at(in_dim, m, out_dim, 1.0, &x, &da, 0.0, &mut dw);
        let mut db = vec![0.0; out_dim];
        for i in 0..m {
            for (acc, g) in db.iter_mut().zip(&da[i * out_dim..(i + 1) * out_dim]) {
                *acc += *g;
            }
        }

        let step = 1e-6;
        for idx in 0..in_dim * out_dim {
            let mut wp = w0.clone();
            let mut wm = w0.clone();
            wp[idx] += step;
            wm[idx] -= step;
            let numeric = (loss_at(&wp, &b0) - loss_at(&wm, &b0)) / (2.0 * step);
            let denom = numeric.abs().max(dw[idx].abs()).max(1e-8);
            assert!(
                (numeric - dw[idx]).abs() / denom < 1e-4,
                "dw[{idx}]: analytic {} vs numeric {numeric}",
                dw[idx]
            );
        }
        for idx in 0..out_dim {
            let mut bp = b0.clone();
            let mut bm = b0.clone();
            bp[idx] += step;
            bm[idx] -= step;
            let numeric = (loss_at(&w0, &bp) - loss_at(&w0, &bm)) / (2.0 * step);
            let denom = numeric.abs().max(db[idx].abs()).max(1e-8);
            assert!((numeric - db[idx]).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn goodness_head_overfits_a_single_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, j) = (8usize, 3usize);
        let mut head = GoodnessHead::<f32>::with_hidden(d, j, 64, 0.01, &mut rng).unwrap();
        let features: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets = vec![2usize];
        let mut neg_rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            head.train_step(&features, d, &targets, &mut neg_rng).unwrap();
        }
        let pred = &head.predict(&features, d).unwrap()[0];
        assert_eq!(pred.class, 2, "scores {:?}", pred.scores);
    }

    #[test]
    fn zero_weight_goodness_head_ties_to_class_1() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = GoodnessHead::<f32>::with_hidden(4, 5, 16, 0.01, &mut rng).unwrap();
        for v in head.l1.w.iter_mut() {
            *v = 0.0;
        }
        for v in head.l2.w.iter_mut() {
            *v = 0.0;
        }
        let features = vec![1.0, -2.0, 0.5, 3.0];
        let pred = &head.predict(&features, 4).unwrap()[0];
        assert_eq!(pred.class, 1);
        assert_eq!(pred.scores.len(), 5);
        assert!(pred.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn negative_labels_avoid_the_target_and_cover_all_alternatives() {
        // The wrong-label mapping must be uniform over {1..J} \ {target}.
        let j = 5usize;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for target in 1..=j {
            let mut seen = std::collections::HashSet::new();
            for _ in 0..200 {
                let r = rng.gen_range(1..j);
                let wrong = if r >= target { r + 1 } else { r };
                assert_ne!(wrong, target);
                assert!((1..=j).contains(&wrong));
                seen.insert(wrong);
            }
            assert_eq!(seen.len(), j - 1, "all wrong labels reachable");
        }
    }

    #[test]
    fn ga_predict_matches_the_worked_example() {
        // Two channels, one per class: activations [2, 3] score [4, 9].
        let x = FeatureTensor::<f64>::new(vec![2.0, 3.0], 1, 2, 1, 1).unwrap();
        let preds = ga_predict(&x, 2).unwrap();
        assert_eq!(preds[0].class, 2);
        assert_eq!(preds[0].scores, vec![4.0, 9.0]);
    }

    #[test]
    fn ga_predict_ties_break_to_class_1() {
        let x = FeatureTensor::<f32>::new(vec![1.5; 6], 1, 6, 1, 1).unwrap();
        let preds = ga_predict(&x, 3).unwrap();
        assert_eq!(preds[0].class, 1);
    }

    #[test]
    fn ga_predict_is_equivariant_under_subset_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, j, s, hw) = (4usize, 3usize, 2usize, 4usize);
        let x = FeatureTensor::<f32>::random_uniform(n, j * s, 2, 2, -1.0, 1.0, &mut rng);
        let base = ga_predict(&x, j).unwrap();
        // Rotate the class subsets: class c's channels move to class c+1.
        let mut rotated = FeatureTensor::<f32>::zeros(n, j * s, 2, 2);
        for ni in 0..n {
            for c in 0..j * s {
                let dest = (c + s) % (j * s);
                for p in 0..hw {
                    rotated.data[(ni * j * s + dest) * hw + p] =
                        x.data[(ni * j * s + c) * hw + p];
                }
            }
        }
        let rot = ga_predict(&rotated, j).unwrap();
        for (b, r) in base.iter().zip(rot.iter()) {
            assert_eq!(r.class, b.class % j + 1);
        }
    }

    #[test]
    fn ga_predict_agrees_with_goodness_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = FeatureTensor::<f32>::random_uniform(5, 20, 3, 3, -2.0, 2.0, &mut rng);
        let preds = ga_predict(&x, 10).unwrap();
        let g = compute_goodness(&x, 10).unwrap();
        for (p, c) in preds.iter().zip(g.argmax_classes()) {
            assert_eq!(p.class, c);
        }
    }

    #[test]
    fn goodness_head_rejects_mismatched_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = GoodnessHead::<f32>::with_hidden(4, 3, 8, 0.01, &mut rng).unwrap();
        let features = vec![0.0; 8];
        assert!(head.predict(&features, 5).is_err());
        let mut neg = ChaCha8Rng::seed_from_u64(2);
        assert!(head.train_step(&features, 4, &[1, 2, 3], &mut neg).is_err());
    }
}
