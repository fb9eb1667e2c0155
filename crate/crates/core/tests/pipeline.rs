use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use segguide_core::backbone::{BackboneModel, ModelConfig, PretrainConfig};
use segguide_core::dataset::{Dataset, SceneConfig};
use segguide_core::evaluation::{export_gamma_vectors, AblationAxis, CANONICAL_TEMPLATE};
use segguide_core::experiment::{hint_count_ablation, run_ablation, AblationSetting, Experiment, ExperimentConfig};
use segguide_core::language::{EmbeddingTable, GuideModel};
use segguide_core::query::{HintRegime, QueryGenConfig};
use segguide_core::trainer::{recompute_loss, train_step, TrainConfig};

fn small_experiment() -> Experiment {
    let cfg = ExperimentConfig {
        n_train: 128,
        n_test: 16,
        pretrain: PretrainConfig {
            epochs: 1,
            ..PretrainConfig::default()
        },
        embedding_dim: 16,
        ..ExperimentConfig::default()
    };
    Experiment::build(cfg, |_, _| {}).unwrap()
}

fn small_train_config(regime: HintRegime) -> TrainConfig {
    TrainConfig {
        hint_regime: regime,
        epochs: 1,
        gru_hidden: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_generation_is_deterministic() {
    let cfg = SceneConfig::default();
    let a = Dataset::generate(&cfg, 12, 4).unwrap();
    let b = Dataset::generate(&cfg, 12, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.checksum(), b.checksum());
    let other = Dataset::generate(&SceneConfig { seed: 1, ..cfg }, 12, 4).unwrap();
    assert_ne!(a.checksum(), other.checksum());
    let halves = &a.manifest.halves;
    assert!(halves.backbone.iter().all(|i| !halves.guide.contains(i)));
}

#[test]
fn smoke_training_writes_a_reloadable_guide() {
    let exp = small_experiment();
    let before = exp.backbone.checksum();
    let prepared = exp.prepare_split("s4").unwrap();
    assert_eq!(prepared.train.len(), 64);
    let guide = exp.train_guide(&small_train_config(HintRegime::Find), &prepared).unwrap();
    assert_eq!(exp.backbone.checksum(), before, "guide training must not touch the backbone");
    assert!(guide.params().iter().all(|p| p.iter().all(|v| v.is_finite())));
    assert!(guide.proj_w.iter().any(|&v| v != 0.0));

    let dir = tempfile::tempdir().unwrap();
    guide.save(dir.path(), &exp.table, Some(before.clone())).unwrap();
    assert!(dir.path().join("guide.bin").exists());
    assert!(dir.path().join("guide.json").exists());
    let (loaded, table, sidecar) = GuideModel::load(dir.path()).unwrap();
    assert_eq!(loaded, guide);
    assert_eq!(table.checksum(), exp.table.checksum());
    assert_eq!(sidecar.backbone_checksum.as_deref(), Some(before.as_str()));

    let bb = dir.path().join("backbone");
    exp.backbone.save(&bb, None).unwrap();
    let (reloaded, _) = BackboneModel::load(&bb).unwrap();
    assert_eq!(reloaded.checksum(), before);

    let gamma = export_gamma_vectors(&guide, &exp.table, exp.class_names(), CANONICAL_TEMPLATE).unwrap();
    assert_eq!(gamma.len(), exp.class_names().len());
}

#[test]
fn logged_losses_can_be_recomputed() {
    let exp = small_experiment();
    let prepared = exp.prepare_split("s3").unwrap();
    let cfg = TrainConfig {
        split: "s3".into(),
        ..small_train_config(HintRegime::FindOrRemove)
    };
    let guide = exp.train_guide(&cfg, &prepared).unwrap();
    let ctx = exp.context();
    let batch: Vec<_> = prepared.train.iter().take(8).collect();
    let mut grads = guide.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mean, queries) = train_step(&ctx, &guide, &batch, cfg.hint_regime, &cfg.query, &mut rng, &mut grads).unwrap();
    let recomputed: f64 = batch
        .iter()
        .zip(&queries)
        .map(|(s, q)| recompute_loss(&ctx, &guide, s, q).unwrap())
        .sum::<f64>()
        / batch.len() as f64;
    assert!((mean - recomputed).abs() < 1e-6, "{mean} vs {recomputed}");
}

#[test]
fn ablations_are_deterministic() {
    let exp = small_experiment();
    let prepared = exp.prepare_split("s4").unwrap();
    let guide = exp.train_guide(&small_train_config(HintRegime::Find), &prepared).unwrap();
    let ctx = exp.context();
    let qcfg = QueryGenConfig::default();
    let run = || {
        let settings = [HintRegime::Find, HintRegime::Remove].map(|regime| AblationSetting {
            name: regime.as_str().into(),
            guide: &guide,
            regime,
            samples: &prepared.test,
        });
        run_ablation(&ctx, AblationAxis::HintRegime, &settings, &qcfg, 3).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.rows.len(), 2);
    assert!(a.rows.iter().all(|r| r.per_seed.len() == 3 && r.std_miou.is_some()));
    assert_eq!(a.rows[0].unguided_miou, a.rows[1].unguided_miou);

    let hints = || hint_count_ablation(&ctx, &guide, &prepared.test, HintRegime::Find, &qcfg, 3, false, 2).unwrap();
    let h = hints();
    assert_eq!(h, hints());
    let settings: Vec<&str> = h.rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(settings, ["0", "1", "2", "3"]);
    assert_eq!(h.rows[0].mean_miou, h.rows[0].unguided_miou);
}

#[test]
fn experiment_rejects_mismatched_parts() {
    let cfg = SceneConfig::default();
    let dataset = Dataset::generate(&cfg, 4, 2).unwrap();
    let mut names = cfg.class_names();
    names.reverse();
    let backbone = BackboneModel::new(ModelConfig::default(), names, 0).unwrap();
    let table = EmbeddingTable::hashed(8, 0).unwrap();
    assert!(Experiment::new(ExperimentConfig::default(), dataset, backbone, table).is_err());
}
