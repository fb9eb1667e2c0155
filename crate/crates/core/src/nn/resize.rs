use ndarray::Array3;

use super::Real;

/// Bilinear spatial resampling with half-pixel centres (edge-clamped), the
/// usual convention for decoder upsampling.
#[derive(Debug, Clone)]
pub struct Resize2d {
    rows: Vec<Tap>,
    cols: Vec<Tap>,
    in_h: usize,
    in_w: usize,
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    t: f64,
}

fn taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            Tap {
                i0,
                i1,
                t: pos - i0 as f64,
            }
        })
        .collect()
}

impl Resize2d {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            rows: taps(in_h, out_h),
            cols: taps(in_w, out_w),
            in_h,
            in_w,
        }
    }

    pub fn out_dim(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn forward<F: Real>(&self, x: &Array3<F>) -> Array3<F> {
        let (h, w, c) = x.dim();
        assert_eq!((h, w), (self.in_h, self.in_w), "resize input size");
        let (oh, ow) = self.out_dim();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = vec![F::zero(); oh * ow * c];
        for (oy, ry) in self.rows.iter().enumerate() {
            let ty = F::of(ry.t);
            for (ox, rx) in self.cols.iter().enumerate() {
                let tx = F::of(rx.t);
                let w00 = (F::one() - ty) * (F::one() - tx);
                let w01 = (F::one() - ty) * tx;
                let w10 = ty * (F::one() - tx);
                let w11 = ty * tx;
                let p00 = (ry.i0 * w + rx.i0) * c;
                let p01 = (ry.i0 * w + rx.i1) * c;
                let p10 = (ry.i1 * w + rx.i0) * c;
                let p11 = (ry.i1 * w + rx.i1) * c;
                let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = w00 * xs[p00 + k] + w01 * xs[p01 + k] + w10 * xs[p10 + k] + w11 * xs[p11 + k];
                }
            }
        }
        Array3::from_shape_vec((oh, ow, c), out).expect("sized buffer")
    }

    /// Transpose of [`Resize2d::forward`].
    pub fn backward<F: Real>(&self, grad: &Array3<F>) -> Array3<F> {
        let (oh, ow, c) = grad.dim();
        assert_eq!((oh, ow), self.out_dim(), "resize gradient size");
        let (h, w) = (self.in_h, self.in_w);
        let gs = grad.as_standard_layout();
        let gs = gs.as_slice().expect("standard layout");
        let mut out = vec![F::zero(); h * w * c];
        for (oy, ry) in self.rows.iter().enumerate() {
            let ty = F::of(ry.t);
            for (ox, rx) in self.cols.iter().enumerate() {
                let tx = F::of(rx.t);
                let weights = [
                    ((F::one() - ty) * (F::one() - tx), ry.i0, rx.i0),
                    ((F::one() - ty) * tx, ry.i0, rx.i1),
                    (ty * (F::one() - tx), ry.i1, rx.i0),
                    (ty * tx, ry.i1, rx.i1),
                ];
                let src = &gs[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for (wt, iy, ix) in weights {
                    let dst = &mut out[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                    for (d, &g) in dst.iter_mut().zip(src) {
                        *d += wt * g;
                    }
                }
            }
        }
        Array3::from_shape_vec((h, w, c), out).expect("sized buffer")
    }
}
