use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;

/// 2-D convolution with square kernel, zero "same" padding and optional stride.
///
/// `weight` is laid out as `(kernel * kernel * in_channels, out_channels)` with
/// the row index ordered `(ky, kx, c)`, matching [`im2col`].
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub kernel: usize,
    pub stride: usize,
}

/// Saved inputs for [`Conv2d::backward`].
#[derive(Debug, Clone)]
pub struct ConvCache<F> {
    cols: Array2<F>,
    in_dim: (usize, usize, usize),
}

impl<F: Real> Conv2d<F> {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (kernel * kernel * in_channels) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = Array2::from_shape_fn((kernel * kernel * in_channels, out_channels), |_| {
            F::of(normal.sample(rng))
        });
        Self {
            weight,
            bias: Array1::zeros(out_channels),
            kernel,
            stride,
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            weight: Array2::zeros((kernel * kernel * in_channels, out_channels)),
            bias: Array1::zeros(out_channels),
            kernel,
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.nrows() / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, ConvCache<F>) {
        let (h, w, c) = x.dim();
        debug_assert_eq!(c, self.in_channels());
        let (oh, ow) = self.output_size(h, w);
        let cols = im2col(x, self.kernel, self.stride, self.pad());
        let mut out = cols.dot(&self.weight);
        out += &self.bias;
        let out = out
            .into_shape_with_order((oh, ow, self.out_channels()))
            .expect("contiguous GEMM output");
        (
            out,
            ConvCache {
                cols,
                in_dim: (h, w, c),
            },
        )
    }

    /// Forward without keeping the column buffer.
    pub fn apply(&self, x: &Array3<F>) -> Array3<F> {
        self.forward(x).0
    }

    /// Returns the input gradient. Weight gradients are accumulated into
    /// `grads` when given.
    pub fn backward(
        &self,
        cache: &ConvCache<F>,
        grad_out: &Array3<F>,
        grads: Option<&mut Conv2d<F>>,
    ) -> Array3<F> {
        let (oh, ow, co) = grad_out.dim();
        let g2 = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((oh * ow, co))
            .expect("contiguous gradient");
        if let Some(acc) = grads {
            ndarray::linalg::general_mat_mul(
                F::one(),
                &cache.cols.t(),
                &g2,
                F::one(),
                &mut acc.weight,
            );
            acc.bias += &g2.sum_axis(Axis(0));
        }
        let dcols = g2.dot(&self.weight.t());
        let (h, w, c) = cache.in_dim;
        col2im(&dcols, h, w, c, self.kernel, self.stride, self.pad())
    }

    pub fn params(&self) -> Vec<&[F]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels(), self.out_channels(), self.kernel, self.stride)
    }

    pub fn cast<G: Real>(&self) -> Conv2d<G> {
        Conv2d {
            weight: super::cast_array(&self.weight),
            bias: super::cast_array(&self.bias),
            kernel: self.kernel,
            stride: self.stride,
        }
    }
}

/// Unfold `x` into one row per output position.
pub fn im2col<F: Real>(x: &Array3<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (h, w, c) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let row = k * k * c;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut cols = vec![F::zero(); oh * ow * row];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * row;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = base + (ky * k + kx) * c;
                    cols[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                }
            }
        }
    }
    Array2::from_shape_vec((oh * ow, row), cols).expect("sized buffer")
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input.
pub fn col2im<F: Real>(
    cols: &Array2<F>,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let row = k * k * c;
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().expect("standard layout");
    let mut out = vec![F::zero(); h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * row;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = base + (ky * k + kx) * c;
                    for (o, &v) in out[dst..dst + c].iter_mut().zip(&cs[src..src + c]) {
                        *o += v;
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((h, w, c), out).expect("sized buffer")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (h, w, c) = x.dim();
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let p = (k / 2) as isize;
        Array3::from_shape_fn((oh, ow, conv.out_channels()), |(oy, ox, o)| {
            let mut acc = conv.bias[o];
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * conv.stride + ky) as isize - p;
                    let ix = (ox * conv.stride + kx) as isize - p;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for ci in 0..c {
                        acc += x[[iy as usize, ix as usize, ci]] * conv.weight[[(ky * k + kx) * c + ci, o]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let conv = Conv2d::<f64>::new(3, 5, k, s, &mut rng);
            let x = Array3::from_shape_fn((7, 6, 3), |(a, b, c)| ((a * 31 + b * 7 + c) % 11) as f64 - 5.0);
            let got = conv.apply(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv2d::<f64>::new(2, 3, 3, 2, &mut rng);
        let x = Array3::from_shape_fn((5, 5, 2), |(a, b, c)| (a as f64 * 0.3 - b as f64 * 0.2 + c as f64).sin());
        let (y, cache) = conv.forward(&x);
        // loss = sum(y * y) / 2
        let mut grads = conv.zeros_like();
        let dx = conv.backward(&cache, &y, Some(&mut grads));
        let loss = |conv: &Conv2d<f64>, x: &Array3<f64>| conv.apply(x).mapv(|v| v * v).sum() / 2.0;
        let eps = 1e-5;
        for idx in [(0, 0, 0), (2, 3, 1), (4, 4, 0)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-6, "{fd} vs {}", dx[idx]);
        }
        for idx in [(0, 0), (7, 2), (17, 1)] {
            let mut cp = conv.clone();
            cp.weight[idx] += eps;
            let mut cm = conv.clone();
            cm.weight[idx] -= eps;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((fd - grads.weight[idx]).abs() < 1e-6);
        }
        let mut cp = conv.clone();
        cp.bias[1] += eps;
        let mut cm = conv.clone();
        cm.bias[1] -= eps;
        let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
        assert!((fd - grads.bias[1]).abs() < 1e-6);
    }
}
