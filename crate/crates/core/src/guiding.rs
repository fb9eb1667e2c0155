//! The guiding block: per-channel and per-row/column affine modulation of a
//! feature volume, optionally wrapped in a residual block.
//!
//! ```text
//! A'[h,w,c] = (1 + alpha[h] + beta[w] + gamma_s[c]) * A[h,w,c] + gamma_b[c]
//! ```

use ndarray::{Array3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, Conv2d, ConvCache, Real};

/// The guide's whole control surface.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GuidingParams<F = f32> {
    pub alpha: Vec<F>,
    pub beta: Vec<F>,
    pub gamma_s: Vec<F>,
    pub gamma_b: Vec<F>,
}

impl<F: Real> GuidingParams<F> {
    /// Identity parameters for a spatio-semantic block.
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            alpha: vec![F::zero(); h],
            beta: vec![F::zero(); w],
            gamma_s: vec![F::zero(); c],
            gamma_b: vec![F::zero(); c],
        }
    }

    /// Identity parameters for a channel-only block (empty `alpha`, `beta`).
    pub fn zeros_channel(c: usize) -> Self {
        Self::zeros(0, 0, c)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.alpha.len(), self.beta.len(), self.gamma_s.len())
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| *v == F::zero()))
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("guiding parameters".into()))
        }
    }

    pub fn slices(&self) -> [&[F]; 4] {
        [&self.alpha, &self.beta, &self.gamma_s, &self.gamma_b]
    }

    pub fn slices_mut(&mut self) -> [&mut [F]; 4] {
        [&mut self.alpha, &mut self.beta, &mut self.gamma_s, &mut self.gamma_b]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenation `alpha ++ beta ++ gamma_s ++ gamma_b`.
    pub fn to_flat(&self) -> Vec<F> {
        self.slices().concat()
    }

    /// Inverse of [`GuidingParams::to_flat`] for the given lengths.
    pub fn from_flat(flat: &[F], h: usize, w: usize, c: usize) -> Result<Self> {
        if flat.len() != h + w + 2 * c {
            return Err(Error::shape(h + w + 2 * c, flat.len()));
        }
        Ok(Self {
            alpha: flat[..h].to_vec(),
            beta: flat[h..h + w].to_vec(),
            gamma_s: flat[h + w..h + w + c].to_vec(),
            gamma_b: flat[h + w + c..].to_vec(),
        })
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<G: Real>(&self) -> GuidingParams<G> {
        let c = |v: &[F]| v.iter().map(|x| G::of(x.to_f64_lossy())).collect();
        GuidingParams {
            alpha: c(&self.alpha),
            beta: c(&self.beta),
            gamma_s: c(&self.gamma_s),
            gamma_b: c(&self.gamma_b),
        }
    }
}

/// Channel-only guidance: `A'_c = (1 + gamma_s[c]) A_c + gamma_b[c]`.
pub fn apply_channel_guidance<F: Real>(a: &Array3<F>, gamma_s: &[F], gamma_b: &[F]) -> Result<Array3<F>> {
    let c = a.dim().2;
    if gamma_s.len() != c || gamma_b.len() != c {
        return Err(Error::shape(
            format!("gamma vectors of length {c}"),
            format!("{} and {}", gamma_s.len(), gamma_b.len()),
        ));
    }
    let mut out = a.to_owned();
    for mut px in out.lanes_mut(Axis(2)) {
        for (k, v) in px.iter_mut().enumerate() {
            *v = (F::one() + gamma_s[k]) * *v + gamma_b[k];
        }
    }
    Ok(out)
}

/// Spatio-semantic guidance. `alpha` and `beta` are resampled to the
/// volume's height and width first.
pub fn apply_full_guidance<F: Real>(a: &Array3<F>, p: &GuidingParams<F>) -> Result<Array3<F>> {
    p.check_finite()?;
    let (h, w, c) = a.dim();
    if p.gamma_s.len() != c || p.gamma_b.len() != c {
        return Err(Error::shape(
            format!("gamma vectors of length {c}"),
            format!("{} and {}", p.gamma_s.len(), p.gamma_b.len()),
        ));
    }
    let (alpha, beta) = resample_spatial_vectors(&p.alpha, &p.beta, h, w)?;
    let mut out = a.to_owned();
    Zip::indexed(&mut out).for_each(|(y, x, k), v| {
        *v = (F::one() + alpha[y] + beta[x] + p.gamma_s[k]) * *v + p.gamma_b[k];
    });
    Ok(out)
}

/// Endpoint-aligned linear interpolation of a vector to `n` entries. A
/// vector of length `n` is returned unchanged; a length-one vector is
/// treated as a constant.
pub fn resample_1d<F: Real>(v: &[F], n: usize) -> Result<Vec<F>> {
    if v.is_empty() {
        return Err(Error::Empty("cannot resample a zero-length vector".into()));
    }
    if v.len() == n {
        return Ok(v.to_vec());
    }
    Ok((0..n)
        .map(|i| {
            let (lo, hi, t) = interp_position(v.len(), n, i);
            v[lo] * (F::one() - F::of(t)) + v[hi] * F::of(t)
        })
        .collect())
}

/// Adjoint of [`resample_1d`]: gradient with respect to the source vector.
pub fn resample_1d_backward<F: Real>(grad: &[F], src_len: usize) -> Vec<F> {
    if grad.len() == src_len {
        return grad.to_vec();
    }
    let mut out = vec![F::zero(); src_len];
    for (i, &g) in grad.iter().enumerate() {
        let (lo, hi, t) = interp_position(src_len, grad.len(), i);
        out[lo] += g * (F::one() - F::of(t));
        out[hi] += g * F::of(t);
    }
    out
}

fn interp_position(src: usize, dst: usize, i: usize) -> (usize, usize, f64) {
    if src == 1 || dst == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
    let lo = (pos.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

pub fn resample_spatial_vectors<F: Real>(
    alpha: &[F],
    beta: &[F],
    h: usize,
    w: usize,
) -> Result<(Vec<F>, Vec<F>)> {
    Ok((resample_1d(alpha, h)?, resample_1d(beta, w)?))
}

/// Gradients of a scalar loss through [`apply_full_guidance`], given the
/// loss gradient at the output. Returns `(d_input, d_params)`; the
/// parameter gradients have the parameters' own (unresampled) lengths.
pub fn full_guidance_backward<F: Real>(
    a: &Array3<F>,
    p: &GuidingParams<F>,
    grad_out: &Array3<F>,
) -> Result<(Array3<F>, GuidingParams<F>)> {
    let (h, w, c) = a.dim();
    let (alpha, beta) = resample_spatial_vectors(&p.alpha, &p.beta, h, w)?;
    let mut d_a = grad_out.to_owned();
    let mut d_alpha = vec![F::zero(); h];
    let mut d_beta = vec![F::zero(); w];
    let mut d_gs = vec![F::zero(); c];
    let mut d_gb = vec![F::zero(); c];
    Zip::indexed(&mut d_a).and(a).for_each(|(y, x, k), g, &v| {
        let gv = *g * v;
        d_alpha[y] += gv;
        d_beta[x] += gv;
        d_gs[k] += gv;
        d_gb[k] += *g;
        *g *= F::one() + alpha[y] + beta[x] + p.gamma_s[k];
    });
    let grads = GuidingParams {
        alpha: resample_1d_backward(&d_alpha, p.alpha.len()),
        beta: resample_1d_backward(&d_beta, p.beta.len()),
        gamma_s: d_gs,
        gamma_b: d_gb,
    };
    Ok((d_a, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// FiLM-style per-channel scale and shift.
    ChannelOnly,
    /// Channel terms plus row (`alpha`) and column (`beta`) scales.
    SpatioSemantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wrapping {
    Direct,
    ResidualBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GuideMode {
    pub variant: Variant,
    pub wrapping: Wrapping,
    #[serde(default = "default_residual_channels")]
    pub residual_channels: usize,
}

fn default_residual_channels() -> usize {
    256
}

impl Default for GuideMode {
    fn default() -> Self {
        Self {
            variant: Variant::SpatioSemantic,
            wrapping: Wrapping::Direct,
            residual_channels: default_residual_channels(),
        }
    }
}

impl GuideMode {
    pub fn new(variant: Variant, wrapping: Wrapping) -> Self {
        Self {
            variant,
            wrapping,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.residual_channels == 0 {
            return Err(Error::Config("residual_channels must be positive".into()));
        }
        Ok(())
    }

    /// Channel count of the modulated volume for a split with `c` channels.
    pub fn modulated_channels(&self, c: usize) -> usize {
        match self.wrapping {
            Wrapping::Direct => c,
            Wrapping::ResidualBlock => self.residual_channels,
        }
    }

    /// Identity parameters for a split of shape `h x w x c`.
    pub fn zero_params<F: Real>(&self, h: usize, w: usize, c: usize) -> GuidingParams<F> {
        let m = self.modulated_channels(c);
        match self.variant {
            Variant::ChannelOnly => GuidingParams::zeros_channel(m),
            Variant::SpatioSemantic => GuidingParams::zeros(h, w, m),
        }
    }

    /// Lengths `(alpha, beta, gamma)` of this mode's parameters.
    pub fn param_lengths(&self, h: usize, w: usize, c: usize) -> (usize, usize, usize) {
        let m = self.modulated_channels(c);
        match self.variant {
            Variant::ChannelOnly => (0, 0, m),
            Variant::SpatioSemantic => (h, w, m),
        }
    }
}

/// Weights of the residual wrapper: `A + out(relu(modulate(in(A))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualWeights<F = f32> {
    pub proj_in: Conv2d<F>,
    pub proj_out: Conv2d<F>,
}

impl<F: Real> ResidualWeights<F> {
    /// Random input projection, zero output projection (identity at init).
    pub fn new(channels: usize, residual_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            proj_in: Conv2d::new(channels, residual_channels, 1, 1, &mut rng),
            proj_out: Conv2d::zeros(residual_channels, channels, 1, 1),
        }
    }

    pub fn params(&self) -> Vec<&[F]> {
        let mut v = self.proj_in.params();
        v.extend(self.proj_out.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut v = self.proj_in.params_mut();
        v.extend(self.proj_out.params_mut());
        v
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            proj_in: self.proj_in.zeros_like(),
            proj_out: self.proj_out.zeros_like(),
        }
    }

    pub fn cast<G: Real>(&self) -> ResidualWeights<G> {
        ResidualWeights {
            proj_in: self.proj_in.cast(),
            proj_out: self.proj_out.cast(),
        }
    }
}

fn modulate<F: Real>(variant: Variant, a: &Array3<F>, p: &GuidingParams<F>) -> Result<Array3<F>> {
    match variant {
        Variant::ChannelOnly => {
            if !p.alpha.is_empty() || !p.beta.is_empty() {
                return Err(Error::Invalid("channel-only guidance takes no alpha/beta".into()));
            }
            p.check_finite()?;
            apply_channel_guidance(a, &p.gamma_s, &p.gamma_b)
        }
        Variant::SpatioSemantic => {
            if p.alpha.is_empty() || p.beta.is_empty() {
                return Err(Error::Invalid("spatio-semantic guidance needs alpha and beta".into()));
            }
            apply_full_guidance(a, p)
        }
    }
}

/// Parameter gradients of [`modulate`]; channel-only leaves `alpha`/`beta` empty.
fn modulate_backward<F: Real>(
    a: &Array3<F>,
    p: &GuidingParams<F>,
    grad_out: &Array3<F>,
) -> Result<(Array3<F>, GuidingParams<F>)> {
    if p.alpha.is_empty() {
        let full = GuidingParams {
            alpha: vec![F::zero()],
            beta: vec![F::zero()],
            gamma_s: p.gamma_s.clone(),
            gamma_b: p.gamma_b.clone(),
        };
        let (d_a, mut g) = full_guidance_backward(a, &full, grad_out)?;
        g.alpha.clear();
        g.beta.clear();
        Ok((d_a, g))
    } else {
        full_guidance_backward(a, p, grad_out)
    }
}

/// Apply guidance under `mode`. `block` must be given exactly when the mode
/// uses the residual wrapper.
pub fn apply_guidance<F: Real>(
    a: &Array3<F>,
    p: &GuidingParams<F>,
    mode: &GuideMode,
    block: Option<&ResidualWeights<F>>,
) -> Result<Array3<F>> {
    Ok(guided_forward(a, p, mode, block)?.0)
}

/// Saved values for differentiating [`apply_guidance`].
pub struct GuidanceTape<F> {
    input: Array3<F>,
    residual: Option<ResidualTape<F>>,
}

struct ResidualTape<F> {
    in_cache: ConvCache<F>,
    projected: Array3<F>,
    activated: Array3<F>,
    out_cache: ConvCache<F>,
}

pub fn guided_forward<F: Real>(
    a: &Array3<F>,
    p: &GuidingParams<F>,
    mode: &GuideMode,
    block: Option<&ResidualWeights<F>>,
) -> Result<(Array3<F>, GuidanceTape<F>)> {
    mode.validate()?;
    match (mode.wrapping, block) {
        (Wrapping::Direct, None) => {
            let out = modulate(mode.variant, a, p)?;
            Ok((
                out,
                GuidanceTape {
                    input: a.clone(),
                    residual: None,
                },
            ))
        }
        (Wrapping::ResidualBlock, Some(b)) => {
            if b.proj_in.in_channels() != a.dim().2 || b.proj_in.out_channels() != mode.residual_channels {
                return Err(Error::shape(
                    format!("{} -> {} residual block", a.dim().2, mode.residual_channels),
                    format!("{} -> {}", b.proj_in.in_channels(), b.proj_in.out_channels()),
                ));
            }
            let (projected, in_cache) = b.proj_in.forward(a);
            let activated = relu(modulate(mode.variant, &projected, p)?);
            let (delta, out_cache) = b.proj_out.forward(&activated);
            let out = a + &delta;
            Ok((
                out,
                GuidanceTape {
                    input: a.clone(),
                    residual: Some(ResidualTape {
                        in_cache,
                        projected,
                        activated,
                        out_cache,
                    }),
                },
            ))
        }
        (Wrapping::Direct, Some(_)) => Err(Error::Invalid("direct guidance takes no block weights".into())),
        (Wrapping::ResidualBlock, None) => Err(Error::Invalid("residual guidance needs block weights".into())),
    }
}

/// Back-propagate through [`guided_forward`]. Returns the parameter gradient;
/// residual-block weight gradients are accumulated into `block_grads`.
pub fn guided_backward<F: Real>(
    tape: &GuidanceTape<F>,
    p: &GuidingParams<F>,
    block: Option<&ResidualWeights<F>>,
    grad_out: &Array3<F>,
    block_grads: Option<&mut ResidualWeights<F>>,
) -> Result<GuidingParams<F>> {
    match (&tape.residual, block) {
        (None, _) => Ok(modulate_backward(&tape.input, p, grad_out)?.1),
        (Some(rt), Some(b)) => {
            let (gi, go) = match block_grads {
                Some(g) => (Some(&mut g.proj_in), Some(&mut g.proj_out)),
                None => (None, None),
            };
            let d_act = b.proj_out.backward(&rt.out_cache, grad_out, go);
            let d_mod = relu_backward(&rt.activated, d_act);
            let (d_proj, grads) = modulate_backward(&rt.projected, p, &d_mod)?;
            if let Some(gi) = gi {
                b.proj_in.backward(&rt.in_cache, &d_proj, Some(gi));
            }
            Ok(grads)
        }
        (Some(_), None) => Err(Error::Invalid("residual guidance needs block weights".into())),
    }
}
