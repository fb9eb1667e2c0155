//! End-to-end pipeline over the shapes world: generate data, pre-train the
//! backbone, train guides per setting and run the evaluation protocols.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneModel, ModelConfig, PretrainConfig};
use crate::backprop::{GuideOptConfig, Guider};
use crate::dataset::{Dataset, Sample, SceneConfig, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::evaluation::{AblationAxis, AblationReport, AblationRow};
use crate::guiding::GuideMode;
use crate::language::{EmbeddingTable, GuideModel};
use crate::metrics::ConfusionMatrix;
use crate::query::{HintRegime, QueryGenConfig};
use crate::trainer::{evaluate_guide, iterative_curve, prepare, train_guide, PreparedSample, TrainConfig, TrainContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub embedding_dim: usize,
    pub embedding_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            n_train: 2000,
            n_test: 200,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            embedding_dim: 50,
            embedding_seed: 0,
        }
    }
}

/// Dataset, frozen backbone and embedding table, with the guide-training
/// half and the test split decoded once.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub backbone: BackboneModel<f32>,
    pub table: EmbeddingTable,
    class_names: Vec<String>,
    guide_samples: Vec<Sample>,
    test_samples: Vec<Sample>,
}

/// Guide-training and test samples prepared at one split.
pub struct PreparedSplit {
    pub split: String,
    pub train: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

impl Experiment {
    /// Generate the dataset and pre-train a backbone on the backbone half.
    pub fn build(config: ExperimentConfig, on_epoch: impl FnMut(usize, f64)) -> Result<Self> {
        let dataset = Dataset::generate(&config.scene, config.n_train, config.n_test)?;
        let train: Vec<Sample> = dataset.backbone_half().map(|l| l.to_sample()).collect();
        let mut backbone = BackboneModel::new(config.model.clone(), config.scene.class_names(), config.pretrain.seed)?;
        backbone.pretrain(&train, &config.pretrain, on_epoch)?;
        let table = EmbeddingTable::hashed(config.embedding_dim, config.embedding_seed)?;
        Self::new(config, dataset, backbone, table)
    }

    pub fn new(config: ExperimentConfig, dataset: Dataset, backbone: BackboneModel<f32>, table: EmbeddingTable) -> Result<Self> {
        if backbone.class_names() != dataset.manifest.class_names.as_slice() {
            return Err(Error::Config("backbone and dataset disagree on class names".into()));
        }
        let guide_samples = dataset.guide_half().map(|l| l.to_sample()).collect();
        let test_samples = dataset.test.iter().map(|l| l.to_sample()).collect();
        Ok(Self {
            class_names: backbone.class_names().to_vec(),
            config,
            dataset,
            backbone,
            table,
            guide_samples,
            test_samples,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn test_samples(&self) -> &[Sample] {
        &self.test_samples
    }

    pub fn guide_samples(&self) -> &[Sample] {
        &self.guide_samples
    }

    pub fn context(&self) -> TrainContext<'_> {
        TrainContext {
            backbone: &self.backbone,
            table: &self.table,
            class_names: &self.class_names,
        }
    }

    pub fn prepare_split(&self, split: &str) -> Result<PreparedSplit> {
        Ok(PreparedSplit {
            split: split.to_string(),
            train: prepare(&self.backbone, split, &self.guide_samples)?,
            test: prepare(&self.backbone, split, &self.test_samples)?,
        })
    }

    pub fn train_guide(&self, cfg: &TrainConfig, prepared: &PreparedSplit) -> Result<GuideModel<f32>> {
        if cfg.split != prepared.split {
            return Err(Error::Config(format!(
                "guide split {} does not match prepared split {}",
                cfg.split, prepared.split
            )));
        }
        Ok(train_guide(&self.context(), cfg, &prepared.train, &[], |_| {})?.0)
    }

    /// Dataset-level mIoU of the question protocol after each of
    /// `checkpoints` questions, answered from ground truth.
    pub fn protocol_curve(
        &self,
        split: &str,
        mode: GuideMode,
        opt: GuideOptConfig,
        checkpoints: &[usize],
    ) -> Result<Vec<f64>> {
        protocol_curve(&self.backbone, split, mode, opt, &self.test_samples, checkpoints)
    }
}

/// Question protocol over `samples` with a ground-truth oracle. Ignore
/// pixels are answered with "no label". Returns one mIoU per checkpoint.
pub fn protocol_curve(
    backbone: &BackboneModel<f32>,
    split: &str,
    mode: GuideMode,
    opt: GuideOptConfig,
    samples: &[Sample],
    checkpoints: &[usize],
) -> Result<Vec<f64>> {
    let questions = checkpoints.iter().copied().max().ok_or_else(|| Error::Empty("no checkpoints".into()))?;
    if samples.is_empty() {
        return Err(Error::Empty("no protocol samples".into()));
    }
    let guider = Guider::new(backbone, split, mode, opt)?;
    let mut cms = vec![ConfusionMatrix::new(backbone.num_classes()); checkpoints.len()];
    for s in samples {
        let oracle = |r: usize, c: usize| {
            let l = s.labels[[r, c]];
            Ok((l != IGNORE_LABEL).then_some(l))
        };
        let trace = guider.run_question_protocol(&s.image, oracle, questions, None)?;
        for (cm, &q) in cms.iter_mut().zip(checkpoints) {
            let step = &trace.steps[q.min(trace.steps.len() - 1)];
            cm.accumulate(&step.prediction, &s.labels)?;
        }
    }
    cms.iter().map(|cm| cm.miou()).collect()
}

/// One trained guide evaluated under one hint regime.
pub struct AblationSetting<'a> {
    pub name: String,
    pub guide: &'a GuideModel<f32>,
    pub regime: HintRegime,
    pub samples: &'a [PreparedSample],
}

/// Guided mIoU per setting over query-sampling seeds `0..num_seeds`.
pub fn run_ablation(
    ctx: &TrainContext,
    axis: AblationAxis,
    settings: &[AblationSetting],
    qcfg: &QueryGenConfig,
    num_seeds: usize,
) -> Result<AblationReport> {
    if settings.is_empty() {
        return Err(Error::Empty("no ablation settings".into()));
    }
    let mut rows = Vec::with_capacity(settings.len());
    for s in settings {
        let mut unguided = 0.0;
        let mut per_seed = Vec::with_capacity(num_seeds);
        for seed in 0..num_seeds as u64 {
            let e = evaluate_guide(ctx, s.guide, s.samples, s.regime, qcfg, seed)?;
            unguided = e.unguided_miou;
            per_seed.push(e.guided_miou);
        }
        rows.push(AblationRow::from_runs(&s.name, unguided, per_seed)?);
    }
    AblationReport::new(axis, num_seeds, rows)
}

/// Repeated-guiding curve as a report with one row per hint count `0..=steps`.
#[allow(clippy::too_many_arguments)]
pub fn hint_count_ablation(
    ctx: &TrainContext,
    guide: &GuideModel<f32>,
    samples: &[PreparedSample],
    regime: HintRegime,
    qcfg: &QueryGenConfig,
    steps: usize,
    stacked: bool,
    num_seeds: usize,
) -> Result<AblationReport> {
    let mut curves = Vec::with_capacity(num_seeds);
    for seed in 0..num_seeds as u64 {
        curves.push(iterative_curve(ctx, guide, samples, steps, regime, qcfg, stacked, seed)?);
    }
    let unguided = curves.first().map_or(0.0, |c| c[0]);
    let rows = (0..=steps)
        .map(|k| AblationRow::from_runs(&k.to_string(), unguided, curves.iter().map(|c| c[k]).collect()))
        .collect::<Result<Vec<_>>>()?;
    AblationReport::new(AblationAxis::NumHints, num_seeds, rows)
}
