//! Guiding by back-propagation: fit guiding parameters to sparse pixel
//! hints with momentum gradient descent while the network stays frozen,
//! and the uncertainty-driven question protocol built on top of it.

use std::collections::HashSet;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::{labels_and_posteriors, BackboneModel, HeadOutput, LabelMap};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::guiding::{guided_backward, guided_forward, GuideMode, GuidingParams, ResidualWeights};
use crate::metrics::image_miou;
use crate::nn::{self, Real};

/// Sparse target labels. The mask is implied: one at `positions`, zero elsewhere.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelHint {
    pub positions: Vec<(usize, usize)>,
    pub classes: Vec<u8>,
}

impl PixelHint {
    pub fn new(
        positions: Vec<(usize, usize)>,
        classes: Vec<u8>,
        size: (usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        if positions.len() != classes.len() {
            return Err(Error::shape(positions.len(), classes.len()));
        }
        let mut hint = Self::default();
        for (p, c) in positions.into_iter().zip(classes) {
            hint.push(p, c, size, num_classes)?;
        }
        Ok(hint)
    }

    /// Add one hint; a repeated position replaces the earlier class.
    pub fn push(&mut self, pos: (usize, usize), class: u8, size: (usize, usize), num_classes: usize) -> Result<()> {
        if pos.0 >= size.0 || pos.1 >= size.1 {
            return Err(Error::Invalid(format!("pixel {pos:?} outside {}x{}", size.0, size.1)));
        }
        if class as usize >= num_classes {
            return Err(Error::Invalid(format!("class {class} outside 0..{num_classes}")));
        }
        match self.positions.iter().position(|&p| p == pos) {
            Some(i) => self.classes[i] = class,
            None => {
                self.positions.push(pos);
                self.classes.push(class);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn mask(&self, size: (usize, usize)) -> Array2<u8> {
        let mut m = Array2::zeros(size);
        for &p in &self.positions {
            m[p] = 1;
        }
        m
    }

    fn targets<F: Real>(&self, size: (usize, usize)) -> (Array2<u8>, Array2<F>) {
        let mut t = Array2::zeros(size);
        let mut w = Array2::from_elem(size, F::zero());
        for (&p, &c) in self.positions.iter().zip(&self.classes) {
            t[p] = c;
            w[p] = F::one();
        }
        (t, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuideOptConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_iterations: usize,
    /// Stop once the mean cross-entropy over hinted pixels is at or below this.
    pub stop_loss: f64,
}

impl Default for GuideOptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            max_iterations: 30,
            stop_loss: 0.01,
        }
    }
}

impl GuideOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceFit<F = f32> {
    /// Lowest-loss iterate.
    pub params: GuidingParams<F>,
    /// Masked loss of every evaluated iterate, starting with the initialisation.
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
}

/// Frozen backbone, split point and guiding mode used for back-propagation guiding.
pub struct Guider<'a, F = f32> {
    pub model: &'a BackboneModel<F>,
    pub split: String,
    pub mode: GuideMode,
    pub block: Option<&'a ResidualWeights<F>>,
    pub cfg: GuideOptConfig,
}

impl<'a, F: Real> Guider<'a, F> {
    pub fn new(model: &'a BackboneModel<F>, split: &str, mode: GuideMode, cfg: GuideOptConfig) -> Result<Self> {
        model.config().level_of(split)?;
        mode.validate()?;
        cfg.validate()?;
        Ok(Self {
            model,
            split: split.to_string(),
            mode,
            block: None,
            cfg,
        })
    }

    pub fn with_block(mut self, block: &'a ResidualWeights<F>) -> Self {
        self.block = Some(block);
        self
    }

    pub fn head(&self, x: &Array3<F>) -> Result<HeadOutput<F>> {
        self.model.forward_head(x, &self.split)
    }

    pub fn zero_params(&self) -> GuidingParams<F> {
        let (h, w, c) = self.model.config().split_shape(&self.split).expect("validated split");
        self.mode.zero_params(h, w, c)
    }

    fn check_params(&self, p: &GuidingParams<F>) -> Result<()> {
        let z = self.zero_params();
        let lens = |q: &GuidingParams<F>| q.slices().map(|s| s.len());
        if lens(p) != lens(&z) {
            return Err(Error::shape(format!("{:?}", lens(&z)), format!("{:?}", lens(p))));
        }
        Ok(())
    }

    /// Logits of the tail on guided features.
    pub fn guided_logits(&self, head: &HeadOutput<F>, p: &GuidingParams<F>) -> Result<Array3<F>> {
        let (feat, _) = guided_forward(&head.features, p, &self.mode, self.block)?;
        self.model.forward_tail(head, &feat)
    }

    pub fn predict(&self, head: &HeadOutput<F>, p: &GuidingParams<F>) -> Result<(LabelMap, Array3<F>)> {
        Ok(labels_and_posteriors(&self.guided_logits(head, p)?))
    }

    /// Mean cross-entropy over hinted pixels and its gradient with respect to the parameters.
    pub fn objective(
        &self,
        head: &HeadOutput<F>,
        hints: &PixelHint,
        p: &GuidingParams<F>,
    ) -> Result<(f64, GuidingParams<F>)> {
        if hints.is_empty() {
            return Err(Error::Empty("no pixel hints".into()));
        }
        let (feat, gtape) = guided_forward(&head.features, p, &self.mode, self.block)?;
        let (logits, tape) = self.model.forward_tail_tape(head, &feat)?;
        let (h, w, _) = logits.dim();
        let (targets, weights) = hints.targets::<F>((h, w));
        let ce = nn::weighted_cross_entropy(&logits, &targets, &weights, F::of(hints.len() as f64));
        let grad_feat = self.model.backward_tail(&tape, &ce.grad, None).features;
        let grads = guided_backward(&gtape, p, self.block, &grad_feat, None)?;
        Ok((ce.loss.to_f64_lossy(), grads))
    }

    /// Momentum gradient descent on the hinted-pixel loss, from zero or
    /// `warm_start`. Network weights are never touched.
    pub fn optimize(
        &self,
        head: &HeadOutput<F>,
        hints: &PixelHint,
        warm_start: Option<&GuidingParams<F>>,
    ) -> Result<GuidanceFit<F>> {
        if hints.is_empty() {
            return Err(Error::Empty("no pixel hints".into()));
        }
        let mut params = match warm_start {
            Some(p) => {
                self.check_params(p)?;
                p.clone()
            }
            None => self.zero_params(),
        };
        let lr = F::of(self.cfg.learning_rate);
        let mu = F::of(self.cfg.momentum);
        let mut velocity = params.zeros_like();
        let mut trace = Vec::with_capacity(self.cfg.max_iterations + 1);
        let mut best = (f64::INFINITY, params.clone());
        let mut iterations = 0;
        loop {
            let (loss, grads) = self.objective(head, hints, &params)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: iterations, loss });
            }
            trace.push(loss);
            if loss < best.0 {
                best = (loss, params.clone());
            }
            if loss <= self.cfg.stop_loss || iterations == self.cfg.max_iterations {
                break;
            }
            for ((p, v), g) in params.slices_mut().into_iter().zip(velocity.slices_mut()).zip(grads.slices()) {
                for i in 0..p.len() {
                    v[i] = mu * v[i] - lr * g[i];
                    p[i] += v[i];
                }
            }
            iterations += 1;
        }
        Ok(GuidanceFit {
            params: best.1,
            loss_trace: trace,
            iterations,
        })
    }
}

/// Top-1 minus top-2 posterior per pixel.
pub fn pixel_margins<F: Real>(posteriors: &Array3<F>) -> Array2<f64> {
    let (h, w, c) = posteriors.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for k in 0..c {
            let v = posteriors[[y, x, k]].to_f64_lossy();
            if v > a {
                b = a;
                a = v;
            } else if v > b {
                b = v;
            }
        }
        if c < 2 {
            a
        } else {
            a - b
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryPixel {
    pub row: usize,
    pub col: usize,
    pub margin: f64,
}

/// The not-yet-asked pixel with the smallest top-2 margin; ties go to the
/// first pixel in row-major order.
pub fn select_query_pixel<F: Real>(posteriors: &Array3<F>, asked: &HashSet<(usize, usize)>) -> Result<QueryPixel> {
    let margins = pixel_margins(posteriors);
    let mut best: Option<QueryPixel> = None;
    for ((row, col), &margin) in margins.indexed_iter() {
        if asked.contains(&(row, col)) {
            continue;
        }
        if best.is_none_or(|b| margin < b.margin) {
            best = Some(QueryPixel { row, col, margin });
        }
    }
    best.ok_or_else(|| Error::Empty("every pixel has already been asked".into()))
}

/// One step of the question protocol; step 0 is the unguided prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolStep {
    pub q: usize,
    pub pixel: Option<(usize, usize)>,
    /// `None` when the oracle had no label for the pixel.
    pub answer: Option<u8>,
    pub miou: Option<f64>,
    pub params_ref: String,
    #[serde(skip)]
    pub prediction: LabelMap,
    #[serde(skip)]
    pub params: GuidingParams<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProtocolTrace {
    pub steps: Vec<ProtocolStep>,
}

impl ProtocolTrace {
    /// One JSON record per step.
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("serialisable") + "\n")
            .collect()
    }
}

/// Short content hash identifying a parameter set.
pub fn params_ref<F: Real>(p: &GuidingParams<F>) -> String {
    checkpoint::checksum(p.slices())[..16].to_string()
}

impl<'a> Guider<'a, f32> {
    /// Ask `questions` times for the true class of the least certain pixel,
    /// accumulating hints and warm-starting each fit from the last one.
    /// `gt`, when given, is used only to report per-step mIoU.
    pub fn run_question_protocol(
        &self,
        x: &Array3<f32>,
        mut oracle: impl FnMut(usize, usize) -> Result<Option<u8>>,
        questions: usize,
        gt: Option<&LabelMap>,
    ) -> Result<ProtocolTrace> {
        let head = self.head(x)?;
        let nc = self.model.num_classes();
        let miou = |pred: &LabelMap| gt.map(|g| image_miou(pred, g, nc)).transpose();
        let mut params = self.zero_params();
        let (mut labels, mut post) = self.predict(&head, &params)?;
        let size = labels.dim();
        let mut trace = ProtocolTrace::default();
        trace.steps.push(ProtocolStep {
            q: 0,
            pixel: None,
            answer: None,
            miou: miou(&labels)?,
            params_ref: params_ref(&params),
            prediction: labels.clone(),
            params: params.clone(),
        });
        let mut asked = HashSet::new();
        let mut hints = PixelHint::default();
        for q in 1..=questions {
            let pick = match select_query_pixel(&post, &asked) {
                Ok(p) => p,
                Err(_) => break,
            };
            let pos = (pick.row, pick.col);
            asked.insert(pos);
            let answer = oracle(pos.0, pos.1)?;
            if let Some(class) = answer {
                hints.push(pos, class, size, nc)?;
                params = self.optimize(&head, &hints, Some(&params))?.params;
                (labels, post) = self.predict(&head, &params)?;
            }
            trace.steps.push(ProtocolStep {
                q,
                pixel: Some(pos),
                answer,
                miou: miou(&labels)?,
                params_ref: params_ref(&params),
                prediction: labels.clone(),
                params: params.clone(),
            });
        }
        Ok(trace)
    }
}
