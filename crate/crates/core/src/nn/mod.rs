//! Minimal CPU tensor kernels with hand-written backward passes.
//!
//! Activations are stored height × width × channels (`Array3`), which makes
//! im2col convolution a single row-major GEMM per layer.

mod conv;
mod loss;
mod optim;
mod resize;

use ndarray::{Array3, NdFloat};
use num_traits::FromPrimitive;

pub use conv::{Conv2d, ConvCache};
pub use loss::{softmax_pixels, weighted_cross_entropy, CrossEntropy};
pub use optim::Adam;
pub use resize::Resize2d;

/// Scalar type usable by every kernel. Implemented for `f32` (training and
/// serving) and `f64` (gradient checks).
pub trait Real: NdFloat + FromPrimitive + std::iter::Sum + Default {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl<T: NdFloat + FromPrimitive + std::iter::Sum + Default> Real for T {}

pub fn relu<F: Real>(mut x: Array3<F>) -> Array3<F> {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
    x
}

/// Backward of ReLU given the activation's output.
pub fn relu_backward<F: Real>(out: &Array3<F>, mut grad: Array3<F>) -> Array3<F> {
    ndarray::Zip::from(&mut grad).and(out).for_each(|g, &o| {
        if o <= F::zero() {
            *g = F::zero();
        }
    });
    grad
}

pub fn sigmoid<F: Real>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// Cast every element of an array between scalar types.
pub fn cast_array<A: Real, B: Real, D: ndarray::Dimension>(
    a: &ndarray::Array<A, D>,
) -> ndarray::Array<B, D> {
    a.mapv(|v| B::of(v.to_f64_lossy()))
}
