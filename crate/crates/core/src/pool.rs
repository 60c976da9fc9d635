//! 2x2 max pooling with stride 2.
//!
//! Applied after ReLU on the grouped-convolution layers of a CFSE block.
//! Argmax indices are retained so a backward path through the pool remains
//! possible for predictor-side plumbing, even though the layer-local losses
//! are taken pre-pool and never need it.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::FeatureTensor;

/// Max-pools each 2x2 window with stride 2. Odd trailing rows/columns are
/// dropped. Returns the pooled tensor and, per output element, the flat
/// index into `input.data` of the winning element (first-scanned wins ties).
pub fn maxpool2x2<T: Scalar>(input: &FeatureTensor<T>) -> Result<(FeatureTensor<T>, Vec<u32>)> {
    if input.h < 2 || input.w < 2 {
        return Err(Error::Config(format!(
            "maxpool2x2 needs spatial dims >= 2, got ({}, {})",
            input.h, input.w
        )));
    }
    let (oh, ow) = (input.h / 2, input.w / 2);
    let mut out = FeatureTensor::zeros(input.n, input.c, oh, ow);
    let mut argmax = vec![0u32; out.len()];
    let mut o = 0usize;
    for n in 0..input.n {
        for c in 0..input.c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = input.idx(n, c, 2 * y, 2 * x);
                    let cand = [base, base + 1, base + input.w, base + input.w + 1];
                    let mut best = cand[0];
                    let mut best_v = input.data[best];
                    for &i in &cand[1..] {
                        let v = input.data[i];
                        if v > best_v {
                            best_v = v;
                            best = i;
                        }
                    }
                    out.data[o] = best_v;
                    argmax[o] = best as u32;
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}
