//! Criteria that need the trained pipeline: one dataset, one frozen backbone,
//! guides trained per setting and shared between criteria.

use std::time::Instant;

use segguide_core::backprop::{GuideOptConfig, Guider};
use segguide_core::evaluation::AblationAxis;
use segguide_core::experiment::{hint_count_ablation, run_ablation, AblationSetting, Experiment, ExperimentConfig, PreparedSplit};
use segguide_core::guiding::{GuideMode, ResidualWeights, Variant, Wrapping};
use segguide_core::language::{GuideConfig, GuideModel};
use segguide_core::metrics::ConfusionMatrix;
use segguide_core::query::{HintRegime, QueryGenConfig};
use segguide_core::trainer::TrainConfig;

use crate::{Check, Outcome};

const SEEDS: usize = 5;
const LATE: &str = "s4";
const EARLY: &str = "s1";

pub struct World {
    pub exp: Experiment,
    pub unguided_miou: f64,
    pub backbone_checksum: String,
    late: PreparedSplit,
    /// Guides at the latest split, by regime.
    pub find: Option<GuideModel<f32>>,
    remove: Option<GuideModel<f32>>,
    find_or_remove: Option<GuideModel<f32>>,
    /// Per-seed guided mIoU of the find guide at the latest split.
    find_guided: Option<Vec<f64>>,
}

impl World {
    pub fn build() -> segguide_core::Result<Self> {
        let exp = Experiment::build(ExperimentConfig::default(), |_, _| {})?;
        let late = exp.prepare_split(LATE)?;
        let mut cm = ConfusionMatrix::new(exp.class_names().len());
        for s in &late.test {
            cm.accumulate(&s.pred, &s.gt)?;
        }
        Ok(Self {
            unguided_miou: cm.miou()?,
            backbone_checksum: exp.backbone.checksum(),
            exp,
            late,
            find: None,
            remove: None,
            find_or_remove: None,
            find_guided: None,
        })
    }

    fn train(&self, regime: HintRegime, prepared: &PreparedSplit) -> Result<GuideModel<f32>, String> {
        let cfg = TrainConfig {
            hint_regime: regime,
            split: prepared.split.clone(),
            ..TrainConfig::default()
        };
        self.exp.train_guide(&cfg, prepared).map_err(|e| e.to_string())
    }

    fn guide(&mut self, regime: HintRegime) -> Result<&GuideModel<f32>, String> {
        let missing = match regime {
            HintRegime::Find => self.find.is_none(),
            HintRegime::Remove => self.remove.is_none(),
            HintRegime::FindOrRemove => self.find_or_remove.is_none(),
        };
        if missing {
            let g = self.train(regime, &self.late)?;
            match regime {
                HintRegime::Find => self.find = Some(g),
                HintRegime::Remove => self.remove = Some(g),
                HintRegime::FindOrRemove => self.find_or_remove = Some(g),
            }
        }
        Ok(match regime {
            HintRegime::Find => self.find.as_ref(),
            HintRegime::Remove => self.remove.as_ref(),
            HintRegime::FindOrRemove => self.find_or_remove.as_ref(),
        }
        .expect("trained above"))
    }

    fn per_seed(&self, guide: &GuideModel<f32>, prepared: &PreparedSplit, regime: HintRegime) -> Result<Vec<f64>, String> {
        let setting = AblationSetting {
            name: regime.as_str().into(),
            guide,
            regime,
            samples: &prepared.test,
        };
        let report = run_ablation(&self.exp.context(), AblationAxis::HintRegime, &[setting], &QueryGenConfig::default(), SEEDS)
            .map_err(|e| e.to_string())?;
        Ok(report.rows[0].per_seed.clone())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn a1(w: &mut World) -> Check {
    let exp = &w.exp;
    let samples = &exp.test_samples()[..100.min(exp.test_samples().len())];
    let modes = [
        GuideMode::new(Variant::ChannelOnly, Wrapping::Direct),
        GuideMode::new(Variant::SpatioSemantic, Wrapping::Direct),
        GuideMode::new(Variant::ChannelOnly, Wrapping::ResidualBlock),
        GuideMode::new(Variant::SpatioSemantic, Wrapping::ResidualBlock),
    ];
    let unguided = samples
        .iter()
        .map(|s| exp.backbone.forward(&s.image))
        .collect::<segguide_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let mut differing = 0;
    let mut checks = 0;
    for split in &exp.config.model.split_points {
        let c = exp.config.model.split_shape(split).map_err(|e| e.to_string())?.2;
        for mode in &modes {
            let block = (mode.wrapping == Wrapping::ResidualBlock).then(|| ResidualWeights::new(c, mode.residual_channels, 7));
            let mut guider = Guider::new(&exp.backbone, split, *mode, GuideOptConfig::default()).map_err(|e| e.to_string())?;
            if let Some(b) = &block {
                guider = guider.with_block(b);
            }
            let zero = guider.zero_params();
            for (s, base) in samples.iter().zip(&unguided) {
                let head = guider.head(&s.image).map_err(|e| e.to_string())?;
                let logits = guider.guided_logits(&head, &zero).map_err(|e| e.to_string())?;
                differing += (logits != *base) as usize;
                checks += 1;
            }
        }
    }
    let shape = exp.config.model.split_shape(LATE).map_err(|e| e.to_string())?;
    let untrained = GuideModel::<f32>::new(
        GuideConfig {
            split: LATE.into(),
            mode: GuideMode::default(),
            gru_hidden: 16,
            embedding_dim: exp.table.dim(),
            feature_shape: [shape.0, shape.1, shape.2],
        },
        0,
    )
    .map_err(|e| e.to_string())?;
    let mut text_differing = 0;
    for (s, base) in w.late.test.iter().zip(&unguided) {
        let out = untrained
            .guide_with_text(&exp.backbone, &s.head, &exp.table, "find the sand on the top left")
            .map_err(|e| e.to_string())?;
        let (labels, _) = segguide_core::backbone::labels_and_posteriors(base);
        text_differing += (out.labels != labels || out.labels != s.pred) as usize;
    }
    Ok(Outcome::new(
        differing == 0 && text_differing == 0,
        format!(
            "{differing}/{checks} logit maps differ over {} images x {} splits x 4 modes; \
             untrained text guide changed {text_differing}/{} predictions",
            samples.len(),
            exp.config.model.split_points.len(),
            samples.len()
        ),
    ))
}

pub fn a4(w: &mut World) -> Check {
    let checkpoints = [0, 1, 5, 10, 20];
    let n = w.exp.test_samples().len();
    let start = Instant::now();
    let curve = w
        .exp
        .protocol_curve(LATE, GuideMode::default(), GuideOptConfig::default(), &checkpoints)
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let gain = curve[4] - curve[0];
    let monotone = curve.windows(2).all(|p| p[1] >= p[0] - 0.003);
    Ok(Outcome::new(
        n >= 200 && gain >= 0.05 && monotone && secs < 1800.0,
        format!(
            "{n} images at {LATE}, mIoU at q=0,1,5,10,20 {}; q20 gain {:+.2} points (need >= 5), \
             non-decreasing within 0.3: {monotone}",
            fmt(&curve),
            100.0 * gain
        ),
    ))
}

pub fn a5(w: &mut World) -> Check {
    let start = Instant::now();
    w.guide(HintRegime::Find)?;
    let train_secs = start.elapsed().as_secs_f64();
    let guide = w.find.as_ref().expect("trained");
    let guided = w.per_seed(guide, &w.late, HintRegime::Find)?;
    let gains: Vec<f64> = guided.iter().map(|g| g - w.unguided_miou).collect();
    let unchanged = w.exp.backbone.checksum() == w.backbone_checksum;
    let gain = mean(&gains);
    w.find_guided = Some(guided);
    Ok(Outcome::new(
        gain >= 0.03 && unchanged && train_secs < 3600.0,
        format!(
            "find guide at {LATE}: unguided {:.4}, gains per seed {}, mean {:+.2} points (need >= 3); \
             backbone checksum unchanged: {unchanged}; training {train_secs:.0}s",
            w.unguided_miou,
            fmt(&gains),
            100.0 * gain
        ),
    ))
}

pub fn a6(w: &mut World) -> Check {
    let mut gains = Vec::new();
    for regime in [HintRegime::Find, HintRegime::FindOrRemove, HintRegime::Remove] {
        let per_seed = match (regime, &w.find_guided) {
            (HintRegime::Find, Some(g)) => g.clone(),
            _ => {
                w.guide(regime)?;
                let guide = match regime {
                    HintRegime::Find => w.find.as_ref(),
                    HintRegime::Remove => w.remove.as_ref(),
                    HintRegime::FindOrRemove => w.find_or_remove.as_ref(),
                }
                .expect("trained");
                w.per_seed(guide, &w.late, regime)?
            }
        };
        gains.push(per_seed.iter().map(|g| g - w.unguided_miou).collect::<Vec<_>>());
    }
    let ordered = (0..SEEDS)
        .filter(|&s| gains[0][s] >= gains[1][s] && gains[1][s] >= gains[2][s])
        .count();
    Ok(Outcome::new(
        ordered >= 4,
        format!(
            "gains per seed find {} find_or_remove {} remove {}; ordered in {ordered}/{SEEDS} seeds (need 4)",
            fmt(&gains[0]),
            fmt(&gains[1]),
            fmt(&gains[2])
        ),
    ))
}

pub fn a7(w: &mut World) -> Check {
    w.guide(HintRegime::Find)?;
    let guide = w.find.as_ref().expect("trained");
    let report = hint_count_ablation(
        &w.exp.context(),
        guide,
        &w.late.test,
        HintRegime::Find,
        &QueryGenConfig::default(),
        4,
        false,
        SEEDS,
    )
    .map_err(|e| e.to_string())?;
    let curve: Vec<f64> = report.rows.iter().map(|r| r.mean_miou).collect();
    Ok(Outcome::new(
        curve[1] >= curve[0] && curve[2] >= curve[0],
        format!("mean mIoU after 0..4 hints {} over {SEEDS} seeds", fmt(&curve)),
    ))
}

pub fn a8(w: &mut World) -> Check {
    let late = match &w.find_guided {
        Some(g) => g.clone(),
        None => {
            w.guide(HintRegime::Find)?;
            w.per_seed(w.find.as_ref().expect("trained"), &w.late, HintRegime::Find)?
        }
    };
    let early_split = w.exp.prepare_split(EARLY).map_err(|e| e.to_string())?;
    let early_guide = w.train(HintRegime::Find, &early_split)?;
    let early = w.per_seed(&early_guide, &early_split, HintRegime::Find)?;
    let (late_m, early_m) = (mean(&late), mean(&early));
    let unchanged = w.exp.backbone.checksum() == w.backbone_checksum;
    Ok(Outcome::new(
        late_m >= early_m && unchanged,
        format!(
            "guided mIoU {EARLY} {early_m:.4} {}, {LATE} {late_m:.4} {}; backbone checksum unchanged: {unchanged}",
            fmt(&early),
            fmt(&late)
        ),
    ))
}
