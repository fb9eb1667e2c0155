use ndarray::{Array2, Array3};

use super::Real;

/// Per-pixel softmax over the class axis.
pub fn softmax_pixels<F: Real>(logits: &Array3<F>) -> Array3<F> {
    let mut out = logits.as_standard_layout().into_owned();
    let c = out.dim().2;
    for px in out.as_slice_mut().expect("standard layout").chunks_mut(c) {
        let max = px.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in px.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in px.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Result of a weighted cross-entropy evaluation.
#[derive(Debug, Clone)]
pub struct CrossEntropy<F> {
    /// `sum(w * ce) / normaliser`
    pub loss: F,
    /// Gradient of `loss` with respect to the logits.
    pub grad: Array3<F>,
}

/// Cross-entropy of `logits` against integer `targets` with per-pixel
/// weights. Pixels with zero weight contribute neither loss nor gradient;
/// the total is divided by `normaliser`.
pub fn weighted_cross_entropy<F: Real>(
    logits: &Array3<F>,
    targets: &Array2<u8>,
    weights: &Array2<F>,
    normaliser: F,
) -> CrossEntropy<F> {
    let (h, w, c) = logits.dim();
    let mut grad = softmax_pixels(logits);
    let mut loss = F::zero();
    let gs = grad.as_slice_mut().expect("standard layout");
    for y in 0..h {
        for x in 0..w {
            let px = &mut gs[(y * w + x) * c..(y * w + x + 1) * c];
            let wt = weights[[y, x]];
            if wt == F::zero() {
                px.iter_mut().for_each(|v| *v = F::zero());
                continue;
            }
            let t = targets[[y, x]] as usize;
            debug_assert!(t < c);
            let p = px[t].max(F::of(1e-300).max(F::min_positive_value()));
            loss += wt * -p.ln();
            px[t] -= F::one();
            let scale = wt / normaliser;
            px.iter_mut().for_each(|v| *v *= scale);
        }
    }
    CrossEntropy {
        loss: loss / normaliser,
        grad,
    }
}
