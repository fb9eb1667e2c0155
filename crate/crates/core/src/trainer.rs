//! Training the language guide against a frozen backbone with generated
//! queries, plus guided evaluation and the repeated-guiding protocol.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneModel, HeadOutput, LabelMap};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::guiding::{apply_guidance, GuideMode};
use crate::language::{tokenize, EmbeddingTable, GuideConfig, GuideModel};
use crate::metrics::{image_miou, ConfusionMatrix};
use crate::nn::Adam;
use crate::query::{build_weight_map, enumerate_errors, render_text, sample_for_regime, HintRegime, QueryGenConfig, QuerySpec};

/// Which half of the training split an operation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetHalf {
    Backbone,
    Guide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hint_regime: HintRegime,
    pub split: String,
    pub mode: GuideMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub dataset_half: DatasetHalf,
    pub gru_hidden: usize,
    pub query: QueryGenConfig,
    /// Evaluate guided mIoU on the held-out slice every this many steps (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hint_regime: HintRegime::Find,
            split: "s4".into(),
            mode: GuideMode::default(),
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            dataset_half: DatasetHalf::Guide,
            gru_hidden: 128,
            query: QueryGenConfig::default(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset_half != DatasetHalf::Guide {
            return Err(Error::Config(
                "guide training must use the half unseen by backbone pre-training".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.mode.validate()?;
        self.query.validate()
    }
}

/// A labelled image with its frozen head activations and unguided prediction.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub head: HeadOutput<f32>,
    pub gt: LabelMap,
    pub pred: LabelMap,
}

pub fn prepare(backbone: &BackboneModel<f32>, split: &str, samples: &[Sample]) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            let head = backbone.forward_head(&s.image, split)?;
            let logits = backbone.forward_tail(&head, &head.features)?;
            let (pred, _) = crate::backbone::labels_and_posteriors(&logits);
            Ok(PreparedSample {
                head,
                gt: s.labels.clone(),
                pred,
            })
        })
        .collect()
}

/// Query drawn for one example; `None` when the example has no fixable error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawnQuery {
    pub spec: Option<QuerySpec>,
    pub text: String,
}

pub fn draw_query<R: Rng + ?Sized>(
    pred: &LabelMap,
    gt: &LabelMap,
    class_names: &[String],
    regime: HintRegime,
    cfg: &QueryGenConfig,
    rng: &mut R,
) -> Result<DrawnQuery> {
    let candidates = enumerate_errors(pred, gt, class_names, cfg)?;
    match sample_for_regime(&candidates, regime, rng) {
        Some(spec) => {
            let text = render_text(&spec, cfg, rng)?;
            Ok(DrawnQuery { spec: Some(spec), text })
        }
        None => Ok(DrawnQuery {
            spec: None,
            text: String::new(),
        }),
    }
}

/// One record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub regime: HintRegime,
    /// Query text of every example in the step's batch (empty for no-op queries).
    pub query_text: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou_eval: Option<f64>,
}

/// Everything that stays fixed while a guide trains.
pub struct TrainContext<'a> {
    pub backbone: &'a BackboneModel<f32>,
    pub table: &'a EmbeddingTable,
    pub class_names: &'a [String],
}

/// Per-pixel-mean weighted cross-entropy of one example; gradients
/// accumulate into `grads`.
pub fn example_loss(
    ctx: &TrainContext,
    guide: &GuideModel<f32>,
    sample: &PreparedSample,
    query: &DrawnQuery,
    grads: &mut GuideModel<f32>,
) -> Result<f64> {
    let weights = build_weight_map(&sample.pred, &sample.gt, query.spec.as_ref())?;
    let targets = sample.gt.mapv(|l| if l == crate::dataset::IGNORE_LABEL { 0 } else { l });
    let (h, w) = sample.gt.dim();
    guide.loss_and_grad(
        ctx.backbone,
        &sample.head,
        &tokenize(&query.text),
        ctx.table,
        &targets,
        &weights,
        (h * w) as f32,
        grads,
    )
}

/// Draw queries for a batch, accumulate gradients and return the mean loss.
pub fn train_step<R: Rng + ?Sized>(
    ctx: &TrainContext,
    guide: &GuideModel<f32>,
    batch: &[&PreparedSample],
    regime: HintRegime,
    qcfg: &QueryGenConfig,
    rng: &mut R,
    grads: &mut GuideModel<f32>,
) -> Result<(f64, Vec<DrawnQuery>)> {
    let mut total = 0.0;
    let mut queries = Vec::with_capacity(batch.len());
    for s in batch {
        let q = draw_query(&s.pred, &s.gt, ctx.class_names, regime, qcfg, rng)?;
        total += example_loss(ctx, guide, s, &q, grads)?;
        queries.push(q);
    }
    Ok((total / batch.len().max(1) as f64, queries))
}

pub fn new_guide(ctx: &TrainContext, cfg: &TrainConfig) -> Result<GuideModel<f32>> {
    let (h, w, c) = ctx.backbone.config().split_shape(&cfg.split)?;
    GuideModel::new(
        GuideConfig {
            split: cfg.split.clone(),
            mode: cfg.mode,
            gru_hidden: cfg.gru_hidden,
            embedding_dim: ctx.table.dim(),
            feature_shape: [h, w, c],
        },
        cfg.seed,
    )
}

/// Train a fresh guide with Adam on `train`; `eval` (if non-empty) is the
/// held-out slice for periodic guided-mIoU checks.
pub fn train_guide(
    ctx: &TrainContext,
    cfg: &TrainConfig,
    train: &[PreparedSample],
    eval: &[PreparedSample],
    mut on_record: impl FnMut(&TrainLogRecord),
) -> Result<(GuideModel<f32>, Vec<TrainLogRecord>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("no guide training samples".into()));
    }
    if train.iter().any(|s| s.head.split != cfg.split) {
        return Err(Error::Config("prepared samples were computed at a different split".into()));
    }
    let mut guide = new_guide(ctx, cfg)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut grads = guide.zeros_like();
            let (loss, queries) = train_step(ctx, &guide, &batch, cfg.hint_regime, &cfg.query, &mut rng, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: step, loss });
            }
            opt.step(guide.params_mut(), grads.params(), 1.0 / batch.len() as f64);
            step += 1;
            let miou_eval = if cfg.eval_every > 0 && step % cfg.eval_every == 0 && !eval.is_empty() {
                Some(evaluate_guide(ctx, &guide, eval, cfg.hint_regime, &cfg.query, cfg.seed)?.guided_miou)
            } else {
                None
            };
            let rec = TrainLogRecord {
                step,
                epoch,
                loss,
                regime: cfg.hint_regime,
                query_text: queries.into_iter().map(|q| q.text).collect(),
                miou_eval,
            };
            on_record(&rec);
            log.push(rec);
        }
        tracing::debug!(epoch, "guide epoch done");
    }
    Ok((guide, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuideEval {
    pub unguided_miou: f64,
    pub guided_miou: f64,
}

impl GuideEval {
    pub fn gain(&self) -> f64 {
        self.guided_miou - self.unguided_miou
    }
}

/// Dataset-level mIoU before and after one generated hint per image.
pub fn evaluate_guide(
    ctx: &TrainContext,
    guide: &GuideModel<f32>,
    samples: &[PreparedSample],
    regime: HintRegime,
    qcfg: &QueryGenConfig,
    seed: u64,
) -> Result<GuideEval> {
    let nc = ctx.class_names.len();
    let mut base = ConfusionMatrix::new(nc);
    let mut guided = ConfusionMatrix::new(nc);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    for s in samples {
        base.accumulate(&s.pred, &s.gt)?;
        let q = draw_query(&s.pred, &s.gt, ctx.class_names, regime, qcfg, &mut rng)?;
        let out = guide.guide_with_text(ctx.backbone, &s.head, ctx.table, &q.text)?;
        guided.accumulate(&out.labels, &s.gt)?;
    }
    Ok(GuideEval {
        unguided_miou: base.miou()?,
        guided_miou: guided.miou()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativeStep {
    pub k: usize,
    pub text: Option<String>,
    pub miou: f64,
    #[serde(skip)]
    pub labels: LabelMap,
}

/// Repeated guiding: at each step a query is generated from the latest
/// prediction. By default the new parameters replace the previous ones on
/// the original head features; with `stacked` they are applied on top of the
/// previously guided features instead. Stops early when no error is left.
#[allow(clippy::too_many_arguments)]
pub fn iterative_guide<R: Rng + ?Sized>(
    ctx: &TrainContext,
    guide: &GuideModel<f32>,
    sample: &PreparedSample,
    steps: usize,
    regime: HintRegime,
    qcfg: &QueryGenConfig,
    stacked: bool,
    rng: &mut R,
) -> Result<Vec<IterativeStep>> {
    let nc = ctx.class_names.len();
    let mut trace = vec![IterativeStep {
        k: 0,
        text: None,
        miou: image_miou(&sample.pred, &sample.gt, nc)?,
        labels: sample.pred.clone(),
    }];
    let mut features = sample.head.features.clone();
    for k in 1..=steps {
        let prev = &trace.last().expect("non-empty").labels;
        let q = draw_query(prev, &sample.gt, ctx.class_names, regime, qcfg, rng)?;
        if q.spec.is_none() {
            break;
        }
        let params = guide.params_for_text(&q.text, ctx.table)?;
        let base = if stacked { &features } else { &sample.head.features };
        let guided = apply_guidance(base, &params, guide.mode(), guide.block.as_ref())?;
        let logits = ctx.backbone.forward_tail(&sample.head, &guided)?;
        let (labels, _) = crate::backbone::labels_and_posteriors(&logits);
        if stacked {
            features = guided;
        }
        trace.push(IterativeStep {
            k,
            text: Some(q.text),
            miou: image_miou(&labels, &sample.gt, nc)?,
            labels,
        });
    }
    Ok(trace)
}

/// Dataset-level mIoU after each of `0..=steps` repeated hints. Images that
/// stop early keep their last prediction.
#[allow(clippy::too_many_arguments)]
pub fn iterative_curve(
    ctx: &TrainContext,
    guide: &GuideModel<f32>,
    samples: &[PreparedSample],
    steps: usize,
    regime: HintRegime,
    qcfg: &QueryGenConfig,
    stacked: bool,
    seed: u64,
) -> Result<Vec<f64>> {
    let nc = ctx.class_names.len();
    let mut cms = vec![ConfusionMatrix::new(nc); steps + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x17e4_a7e5);
    for s in samples {
        let trace = iterative_guide(ctx, guide, s, steps, regime, qcfg, stacked, &mut rng)?;
        for (k, cm) in cms.iter_mut().enumerate() {
            cm.accumulate(&trace[k.min(trace.len() - 1)].labels, &s.gt)?;
        }
    }
    cms.iter().map(|cm| cm.miou()).collect()
}

/// Loss of one example recomputed from its stored query, without gradients.
pub fn recompute_loss(ctx: &TrainContext, guide: &GuideModel<f32>, sample: &PreparedSample, query: &DrawnQuery) -> Result<f64> {
    let mut scratch = guide.zeros_like();
    example_loss(ctx, guide, sample, query, &mut scratch)
}

/// Uniform 0.5 weights over labelled pixels (the no-op query).
pub fn noop_weights(gt: &LabelMap) -> Array2<f32> {
    build_weight_map(gt, gt, None).expect("same shape")
}
