use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde_json::json;

use segguide_core::backbone::{BackboneModel, ModelConfig, PretrainConfig};
use segguide_core::backprop::{GuideOptConfig, Guider};
use segguide_core::dataset::{Dataset, Sample, SceneConfig, IGNORE_LABEL};
use segguide_core::evaluation::{export_gamma_vectors, gamma_csv, cosine_similarity, mean_pairwise_similarity, AblationAxis, AblationReport};
use segguide_core::experiment::{hint_count_ablation, run_ablation, AblationSetting};
use segguide_core::guiding::{GuideMode, Variant, Wrapping};
use segguide_core::language::{EmbeddingTable, GuideModel};
use segguide_core::metrics::ConfusionMatrix;
use segguide_core::query::{HintRegime, QueryGenConfig};
use segguide_core::trainer::{self, prepare, DatasetHalf, PreparedSample, TrainConfig, TrainContext};

use crate::config::*;

/// Failure reported to the user as JSON on stderr.
#[derive(Debug)]
pub struct Failure {
    pub message: String,
    pub hint: Option<String>,
}

impl Failure {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            hint: None,
        }
    }

    fn hint(mut self, hint: impl Into<String>) -> Self {
        self.hint = Some(hint.into());
        self
    }
}

impl From<segguide_core::Error> for Failure {
    fn from(e: segguide_core::Error) -> Self {
        Self::new(e.to_string())
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(format!("{}: {e}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    require(dir, "data")?;
    Dataset::read(dir).map_err(|e| {
        Failure::from(e).hint(format!("generate one with `segguide gen-data --out {}`", dir.display()))
    })
}

fn load_backbone(dir: &Path) -> Result<BackboneModel<f32>, Failure> {
    require(dir, "backbone")?;
    BackboneModel::load(dir)
        .map(|(m, _)| m)
        .map_err(|e| Failure::from(e).hint(format!("train one with `segguide train-backbone --data <dataset> --out {}`", dir.display())))
}

fn load_guide(dir: &Path) -> Result<(GuideModel<f32>, EmbeddingTable), Failure> {
    if !dir.exists() {
        return Err(Failure::new(format!("missing guide checkpoint {}", dir.display()))
            .hint(format!("train it with `segguide train-guide --out {}`", dir.display())));
    }
    GuideModel::load(dir).map(|(g, t, _)| (g, t)).map_err(Failure::from)
}

fn parse_mode(variant: &str, wrapping: &str, residual_channels: usize) -> Result<GuideMode, Failure> {
    let variant = match variant {
        "spatio_semantic" => Variant::SpatioSemantic,
        "channel_only" => Variant::ChannelOnly,
        other => return Err(Failure::new(format!("unknown variant `{other}` (spatio_semantic, channel_only)"))),
    };
    let wrapping = match wrapping {
        "direct" => Wrapping::Direct,
        "residual_block" => Wrapping::ResidualBlock,
        other => return Err(Failure::new(format!("unknown wrapping `{other}` (direct, residual_block)"))),
    };
    let mode = GuideMode {
        variant,
        wrapping,
        residual_channels,
    };
    mode.validate()?;
    Ok(mode)
}

fn create_file(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_fail(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    let mut f = create_file(path)?;
    f.write_all(text.as_bytes()).map_err(|e| io_fail(path, e))
}

fn samples<'a>(items: impl Iterator<Item = &'a segguide_core::dataset::LabeledImage>) -> Vec<Sample> {
    items.map(|l| l.to_sample()).collect()
}

fn dataset_miou(model: &BackboneModel<f32>, data: &[Sample]) -> Result<ConfusionMatrix, Failure> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for s in data {
        let (pred, _) = model.predict(&s.image)?;
        cm.accumulate(&pred, &s.labels)?;
    }
    Ok(cm)
}

pub fn gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let cfg: GenDataConfig = resolve(args.config.as_deref(), &args)?;
    require(&cfg.out, "out")?;
    let scene = SceneConfig {
        image_size: (cfg.image_size, cfg.image_size),
        num_classes: cfg.num_classes,
        objects_per_scene: (cfg.objects_min, cfg.objects_max),
        seed: cfg.seed,
        min_region_pixels: cfg.min_region_pixels,
    };
    let ds = Dataset::generate(&scene, cfg.n_train, cfg.n_test)?;
    ds.write(&cfg.out)?;
    write_resolved(&cfg.out.join(RESOLVED_CONFIG), &cfg)?;
    println!(
        "{}",
        json!({ "out": cfg.out, "train": cfg.n_train, "test": cfg.n_test, "checksum": ds.checksum() })
    );
    Ok(())
}

pub fn train_backbone(args: TrainBackboneArgs) -> Result<(), Failure> {
    let cfg: TrainBackboneConfig = resolve(args.config.as_deref(), &args)?;
    require(&cfg.out, "out")?;
    let ds = load_dataset(&cfg.data)?;
    let model_cfg = ModelConfig {
        input_size: ds.manifest.scene.image_size,
        num_classes: ds.manifest.class_names.len(),
        stem_channels: cfg.stem_channels,
        channel_widths: cfg.channel_widths.clone(),
        split_points: (1..=cfg.channel_widths.len()).map(|i| format!("s{i}")).collect(),
    };
    let pcfg = PretrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
    };
    let mut model = BackboneModel::new(model_cfg, ds.manifest.class_names.clone(), cfg.seed)?;
    let train = samples(ds.backbone_half());
    let mut log = create_file(&cfg.out.join("train_log.jsonl"))?;
    let mut log_err = None;
    model.pretrain(&train, &pcfg, |epoch, loss| {
        tracing::info!(epoch, loss, "backbone epoch");
        if let Err(e) = writeln!(log, "{}", json!({ "epoch": epoch, "loss": loss })) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_fail(&cfg.out.join("train_log.jsonl"), e));
    }
    let train_cm = dataset_miou(&model, &train)?;
    let test_cm = dataset_miou(&model, &samples(ds.test.iter()))?;
    model.save(&cfg.out, Some(train_cm.miou()?))?;
    let class_iou: BTreeMap<&str, Option<f64>> = ds
        .manifest
        .class_names
        .iter()
        .map(String::as_str)
        .zip(test_cm.class_iou())
        .collect();
    let metrics = json!({
        "train_miou": train_cm.miou()?,
        "test_miou": test_cm.miou()?,
        "test_pixel_accuracy": test_cm.pixel_accuracy()?,
        "test_class_iou": class_iou,
        "checksum": model.checksum(),
    });
    write_text(&cfg.out.join("metrics.json"), &serde_json::to_string_pretty(&metrics).expect("json"))?;
    write_resolved(&cfg.out.join(RESOLVED_CONFIG), &cfg)?;
    println!("{metrics}");
    Ok(())
}

fn query_config(path: Option<&Path>, size: (usize, usize)) -> Result<QueryGenConfig, Failure> {
    Ok(match path {
        Some(p) => QueryGenConfig::load(p)?,
        None => QueryGenConfig::for_image(size.0, size.1),
    })
}

pub fn train_guide(args: TrainGuideArgs) -> Result<(), Failure> {
    let cfg: TrainGuideConfig = resolve(args.config.as_deref(), &args)?;
    require(&cfg.out, "out")?;
    let ds = load_dataset(&cfg.data)?;
    let backbone = load_backbone(&cfg.backbone)?;
    let checksum_before = backbone.checksum();
    let table = match &cfg.embedding_file {
        Some(p) => EmbeddingTable::from_file(p, cfg.embedding_dim)?,
        None => EmbeddingTable::hashed(cfg.embedding_dim, cfg.embedding_seed)?,
    };
    let tcfg = TrainConfig {
        hint_regime: cfg.hint_regime.parse()?,
        split: cfg.split.clone(),
        mode: parse_mode(&cfg.variant, &cfg.wrapping, cfg.residual_channels)?,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        dataset_half: DatasetHalf::Guide,
        gru_hidden: cfg.gru_hidden,
        query: query_config(cfg.query_config.as_deref(), ds.manifest.scene.image_size)?,
        eval_every: cfg.eval_every,
    };
    let ctx = TrainContext {
        backbone: &backbone,
        table: &table,
        class_names: &ds.manifest.class_names,
    };
    let train = prepare(&backbone, &cfg.split, &samples(ds.guide_half()))?;
    let test = prepare(&backbone, &cfg.split, &samples(ds.test.iter()))?;
    let held_out = &test[..cfg.eval_images.min(test.len())];
    let log_path = cfg.out.join("train_log.jsonl");
    let mut log = create_file(&log_path)?;
    let mut log_err = None;
    let (guide, _) = trainer::train_guide(&ctx, &tcfg, &train, held_out, |rec| {
        if rec.step % 50 == 0 {
            tracing::info!(step = rec.step, epoch = rec.epoch, loss = rec.loss, "guide step");
        }
        let line = serde_json::to_string(rec).expect("json");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_fail(&log_path, e));
    }
    log.flush().map_err(|e| io_fail(&log_path, e))?;
    if backbone.checksum() != checksum_before {
        return Err(Failure::new("backbone weights changed during guide training"));
    }
    guide.save(&cfg.out, &table, Some(checksum_before))?;
    let e = trainer::evaluate_guide(&ctx, &guide, &test, tcfg.hint_regime, &tcfg.query, 0)?;
    let summary = json!({
        "regime": tcfg.hint_regime.as_str(),
        "split": cfg.split,
        "unguided_miou": e.unguided_miou,
        "guided_miou": e.guided_miou,
        "gain": e.gain(),
        "guide_checksum": guide.checksum(),
    });
    write_text(&cfg.out.join("eval.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
    write_resolved(&cfg.out.join(RESOLVED_CONFIG), &cfg)?;
    println!("{summary}");
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let cfg: EvalConfig = resolve(args.config.as_deref(), &args)?;
    require(&cfg.out, "out")?;
    let axis: AblationAxis = cfg.axis.parse()?;
    if cfg.seeds == 0 {
        return Err(Failure::new("--seeds must be at least 1"));
    }
    let ds = load_dataset(&cfg.data)?;
    let backbone = load_backbone(&cfg.backbone)?;
    let qcfg = query_config(cfg.query_config.as_deref(), ds.manifest.scene.image_size)?;
    let test = samples(ds.test.iter());
    let report = if axis == AblationAxis::NumHints {
        let path = cfg.guide.clone().ok_or_else(|| Failure::new("--guide is required for the num_hints axis"))?;
        let (guide, table) = load_guide(&path)?;
        let ctx = TrainContext {
            backbone: &backbone,
            table: &table,
            class_names: &ds.manifest.class_names,
        };
        let prepared = prepare(&backbone, guide.split(), &test)?;
        let regime: HintRegime = cfg.regime.parse()?;
        hint_count_ablation(&ctx, &guide, &prepared, regime, &qcfg, cfg.hints, cfg.stacked, cfg.seeds)?
    } else {
        let names = match axis {
            AblationAxis::SplitLocation => &cfg.splits,
            AblationAxis::HintRegime => &cfg.regimes,
            _ => &cfg.modes,
        };
        if names.is_empty() {
            return Err(Failure::new(format!("no settings given for axis {}", axis.as_str())));
        }
        require(&cfg.guide_root, "guide-root")?;
        let mut guides = Vec::new();
        for name in names {
            let (guide, table) = load_guide(&cfg.guide_root.join(name))?;
            if axis == AblationAxis::SplitLocation && guide.split() != name {
                return Err(Failure::new(format!("guide in {name}/ was trained at {}", guide.split())));
            }
            guides.push((name.clone(), guide, table));
        }
        let table = guides[0].2.clone();
        if guides.iter().any(|g| g.2.checksum() != table.checksum()) {
            return Err(Failure::new("settings use different embedding tables"));
        }
        let mut prepared: BTreeMap<String, Vec<PreparedSample>> = BTreeMap::new();
        for (_, g, _) in &guides {
            if !prepared.contains_key(g.split()) {
                prepared.insert(g.split().to_string(), prepare(&backbone, g.split(), &test)?);
            }
        }
        let settings = guides
            .iter()
            .map(|(name, g, _)| {
                let regime = if axis == AblationAxis::HintRegime {
                    name.parse()?
                } else {
                    cfg.regime.parse()?
                };
                Ok(AblationSetting {
                    name: name.clone(),
                    guide: g,
                    regime,
                    samples: &prepared[g.split()],
                })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let ctx = TrainContext {
            backbone: &backbone,
            table: &table,
            class_names: &ds.manifest.class_names,
        };
        run_ablation(&ctx, axis, &settings, &qcfg, cfg.seeds)?
    };
    write_report(&cfg.out, &report)?;
    write_resolved(&cfg.out.join(RESOLVED_CONFIG), &cfg)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn write_report(dir: &Path, report: &AblationReport) -> Result<(), Failure> {
    write_text(&dir.join("report.csv"), &report.to_csv())?;
    write_text(&dir.join("report.json"), &serde_json::to_string_pretty(report).expect("json"))
}

pub fn guide_bp(args: GuideBpArgs) -> Result<(), Failure> {
    let cfg: GuideBpConfig = resolve(args.config.as_deref(), &args)?;
    require(&cfg.out, "out")?;
    let ds = load_dataset(&cfg.data)?;
    let backbone = load_backbone(&cfg.backbone)?;
    let opt = GuideOptConfig {
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        max_iterations: cfg.max_iterations,
        stop_loss: cfg.stop_loss,
    };
    let mode = parse_mode(&cfg.variant, "direct", GuideMode::default().residual_channels)?;
    let guider = Guider::new(&backbone, &cfg.split, mode, opt)?;
    let n = if cfg.images == 0 { ds.test.len() } else { cfg.images.min(ds.test.len()) };
    let mut cms = vec![ConfusionMatrix::new(backbone.num_classes()); cfg.questions + 1];
    let mut out = create_file(&cfg.out)?;
    for (i, item) in ds.test.iter().take(n).enumerate() {
        let s = item.to_sample();
        let oracle = |r: usize, c: usize| {
            let l = s.labels[[r, c]];
            Ok((l != IGNORE_LABEL).then_some(l))
        };
        let trace = guider.run_question_protocol(&s.image, oracle, cfg.questions, Some(&s.labels))?;
        for step in &trace.steps {
            let mut v = serde_json::to_value(step).expect("json");
            v["image"] = json!(i);
            writeln!(out, "{v}").map_err(|e| io_fail(&cfg.out, e))?;
        }
        for (q, cm) in cms.iter_mut().enumerate() {
            cm.accumulate(&trace.steps[q.min(trace.steps.len() - 1)].prediction, &s.labels)?;
        }
        tracing::info!(image = i, "protocol done");
    }
    out.flush().map_err(|e| io_fail(&cfg.out, e))?;
    let curve: Vec<f64> = cms.iter().map(|cm| cm.miou()).collect::<Result<_, _>>()?;
    let accuracy: Vec<f64> = cms.iter().map(|cm| cm.pixel_accuracy()).collect::<Result<_, _>>()?;
    let summary = json!({ "images": n, "questions": (0..=cfg.questions).collect::<Vec<_>>(), "miou": curve, "pixel_accuracy": accuracy });
    let stem = cfg.out.file_stem().map_or("trace".into(), |s| s.to_string_lossy().into_owned());
    let curve_path = cfg.out.with_file_name(format!("{stem}.curve.json"));
    write_text(&curve_path, &serde_json::to_string_pretty(&summary).expect("json"))?;
    write_resolved(&sibling_config_path(&cfg.out), &cfg)?;
    println!("{summary}");
    Ok(())
}

pub fn export_gamma(args: ExportGammaArgs) -> Result<(), Failure> {
    let cfg: ExportGammaConfig = resolve(args.config.as_deref(), &args)?;
    require(&cfg.out, "out")?;
    require(&cfg.guide, "guide")?;
    let (guide, table) = load_guide(&cfg.guide)?;
    let backbone = load_backbone(&cfg.backbone)?;
    let rows = export_gamma_vectors(&guide, &table, backbone.class_names(), &cfg.template)?;
    write_text(&cfg.out, &gamma_csv(&rows))?;
    let mut pairs: Vec<(f64, &str, &str)> = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            pairs.push((cosine_similarity(&rows[i].1, &rows[j].1), &rows[i].0, &rows[j].0));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top: Vec<_> = pairs.iter().take(3).map(|(s, a, b)| json!({ "pair": [a, b], "cosine": s })).collect();
    write_resolved(&sibling_config_path(&cfg.out), &cfg)?;
    println!("{}", json!({ "classes": rows.len(), "mean_pairwise_cosine": mean_pairwise_similarity(&rows), "most_similar": top }));
    Ok(())
}

pub fn serve(args: ServeArgs) -> Result<(), Failure> {
    let cfg: ServeConfig = resolve(args.config.as_deref(), &args)?;
    let backbone = load_backbone(&cfg.backbone)?;
    let guide = cfg.guide.as_deref().map(load_guide).transpose()?;
    let opt = GuideOptConfig {
        learning_rate: cfg.learning_rate,
        max_iterations: cfg.max_iterations,
        ..Default::default()
    };
    let models = segguide_server::session::Models::new(backbone, guide, &cfg.split, GuideMode::default(), opt)?;
    let service = segguide_server::ServiceConfig {
        max_upload_bytes: cfg.max_upload_bytes,
        persist_dir: cfg.persist_dir.clone(),
        cors_origin: cfg.cors_origin.clone(),
    };
    let state = segguide_server::AppState::new(models, service).map_err(|e| Failure::new(e.message))?;
    if let Some(dir) = &cfg.persist_dir {
        write_resolved(&dir.join(RESOLVED_CONFIG), &cfg)?;
    }
    let app = segguide_server::router(Arc::new(state));
    let addr = format!("{}:{}", cfg.host, cfg.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::new(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Failure::new(format!("cannot bind {addr}: {e}")))?;
        tracing::info!(%addr, "serving");
        axum::serve(listener, app).await.map_err(|e| Failure::new(e.to_string()))
    })
}
