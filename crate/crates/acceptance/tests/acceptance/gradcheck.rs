//! Central finite differences at 64-bit against the analytic gradients.

use ndarray::{Array1, Array3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use segguide_core::backbone::{BackboneModel, ModelConfig};
use segguide_core::backprop::{GuideOptConfig, Guider, PixelHint};
use segguide_core::guiding::{guided_backward, guided_forward, GuideMode, GuidingParams, ResidualWeights, Variant, Wrapping};
use segguide_core::language::Gru;

use crate::{Check, Outcome};

const EPS: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error of `grad` against central differences of `f` at `x`.
fn worst_error(x: &[f64], grad: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), grad.len());
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + EPS;
        let up = f(&probe);
        probe[i] = x[i] - EPS;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * EPS)));
    }
    worst
}

fn modes() -> [GuideMode; 4] {
    let residual = |variant| GuideMode {
        residual_channels: 12,
        ..GuideMode::new(variant, Wrapping::ResidualBlock)
    };
    [
        GuideMode::new(Variant::ChannelOnly, Wrapping::Direct),
        GuideMode::new(Variant::SpatioSemantic, Wrapping::Direct),
        residual(Variant::ChannelOnly),
        residual(Variant::SpatioSemantic),
    ]
}

fn label(mode: &GuideMode) -> String {
    let v = match mode.variant {
        Variant::ChannelOnly => "channel",
        Variant::SpatioSemantic => "spatio-semantic",
    };
    let w = match mode.wrapping {
        Wrapping::Direct => "direct",
        Wrapping::ResidualBlock => "residual",
    };
    format!("{v}/{w}")
}

fn random_params(rng: &mut StdRng, mode: &GuideMode, (h, w, c): (usize, usize, usize)) -> GuidingParams<f64> {
    let mut p = mode.zero_params::<f64>(h, w, c);
    for s in p.slices_mut() {
        s.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    p
}

/// Residual weights with a non-zero output projection so gradients reach the parameters.
fn random_block(rng: &mut StdRng, c: usize, mode: &GuideMode) -> Option<ResidualWeights<f64>> {
    (mode.wrapping == Wrapping::ResidualBlock).then(|| {
        let mut b = ResidualWeights::<f64>::new(c, mode.residual_channels, rng.random());
        b.proj_out.weight.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        b
    })
}

fn flat_to_params(flat: &[f64], like: &GuidingParams<f64>) -> GuidingParams<f64> {
    GuidingParams::from_flat(flat, like.alpha.len(), like.beta.len(), like.gamma_s.len()).expect("same layout")
}

/// Guiding block alone under the linear functional `sum(weights * output)`.
fn block_error(rng: &mut StdRng, mode: &GuideMode, shape: (usize, usize, usize)) -> Result<f64, String> {
    let a = Array3::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0));
    let weights = Array3::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0));
    let p = random_params(rng, mode, shape);
    let block = random_block(rng, shape.2, mode);
    let (_, tape) = guided_forward(&a, &p, mode, block.as_ref()).map_err(|e| e.to_string())?;
    let grad = guided_backward(&tape, &p, block.as_ref(), &weights, None).map_err(|e| e.to_string())?;
    let loss = |flat: &[f64]| {
        let q = flat_to_params(flat, &p);
        let (out, _) = guided_forward(&a, &q, mode, block.as_ref()).expect("forward");
        (&out * &weights).sum()
    };
    Ok(worst_error(&p.to_flat(), &grad.to_flat(), loss))
}

/// Masked cross-entropy through a frozen 64-bit network.
fn objective_error(rng: &mut StdRng, mode: &GuideMode) -> Result<f64, String> {
    let cfg = ModelConfig {
        input_size: (32, 32),
        num_classes: 4,
        stem_channels: 8,
        channel_widths: vec![16, 16, 16],
        split_points: ["s1", "s2", "s3"].map(String::from).to_vec(),
    };
    let names = (0..4).map(|i| format!("c{i}")).collect();
    let model = BackboneModel::<f64>::new(cfg, names, rng.random()).map_err(|e| e.to_string())?;
    let shape = model.config().split_shape("s2").map_err(|e| e.to_string())?;
    let block = random_block(rng, shape.2, mode);
    let mut guider = Guider::new(&model, "s2", *mode, GuideOptConfig::default()).map_err(|e| e.to_string())?;
    if let Some(b) = &block {
        guider = guider.with_block(b);
    }
    let x = Array3::from_shape_simple_fn((32, 32, 3), || rng.random_range(0.0..1.0));
    let head = guider.head(&x).map_err(|e| e.to_string())?;
    let positions: Vec<(usize, usize)> = (0..6).map(|_| (rng.random_range(0..32), rng.random_range(0..32))).collect();
    let classes = (0..6).map(|_| rng.random_range(0..4u8)).collect();
    let hints = PixelHint::new(positions, classes, (32, 32), 4).map_err(|e| e.to_string())?;
    let p = random_params(rng, mode, shape);
    let (_, grad) = guider.objective(&head, &hints, &p).map_err(|e| e.to_string())?;
    let loss = |flat: &[f64]| guider.objective(&head, &hints, &flat_to_params(flat, &p)).expect("objective").0;
    Ok(worst_error(&p.to_flat(), &grad.to_flat(), loss))
}

fn gru_error(rng: &mut StdRng, input: usize, hidden: usize, steps: usize) -> Result<f64, String> {
    let gru = Gru::<f64>::new(input, hidden, rng.random());
    let xs: Vec<Array1<f64>> = (0..steps)
        .map(|_| Array1::from_shape_simple_fn(input, || rng.random_range(-1.0..1.0)))
        .collect();
    let weights = Array1::from_shape_simple_fn(hidden, || rng.random_range(-1.0..1.0));
    let (_, tape) = gru.forward(&xs).map_err(|e| e.to_string())?;
    let mut grads = gru.zeros_like();
    gru.backward(&tape, &weights, &mut grads);
    let flatten = |g: &Gru<f64>| g.params().concat();
    let loss = |flat: &[f64]| {
        let mut probe = gru.clone();
        let mut rest = flat;
        for s in probe.params_mut() {
            let (head, tail) = rest.split_at(s.len());
            s.copy_from_slice(head);
            rest = tail;
        }
        probe.forward(&xs).expect("forward").0.dot(&weights)
    };
    Ok(worst_error(&flatten(&gru), &flatten(&grads), loss))
}

pub fn a2() -> Check {
    let mut rng = StdRng::seed_from_u64(2);
    let mut parts = Vec::new();
    let mut worst_block: f64 = 0.0;
    for mode in modes() {
        for shape in [(3, 5, 4), (8, 8, 16)] {
            worst_block = worst_block.max(block_error(&mut rng, &mode, shape)?);
        }
    }
    parts.push(format!("block {worst_block:.2e}"));
    let mut worst_objective: f64 = 0.0;
    for mode in modes() {
        let e = objective_error(&mut rng, &mode)?;
        parts.push(format!("objective {} {e:.2e}", label(&mode)));
        worst_objective = worst_objective.max(e);
    }
    let mut worst_gru: f64 = 0.0;
    for (input, hidden, steps) in [(5, 4, 3), (6, 8, 5)] {
        worst_gru = worst_gru.max(gru_error(&mut rng, input, hidden, steps)?);
    }
    parts.push(format!("gru {worst_gru:.2e}"));
    let pass = worst_block < 1e-4 && worst_objective < 1e-4 && worst_gru < 1e-3;
    Ok(Outcome::new(
        pass,
        format!("max relative error: {} (tol 1e-4, gru 1e-3)", parts.join(", ")),
    ))
}
