//! Flag and config-file definitions per subcommand, and their merge.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::commands::Failure;

/// Defaults, then the config file, then explicit flags.
pub fn resolve<C, A>(file: Option<&Path>, flags: &A) -> Result<C, Failure>
where
    C: Serialize + DeserializeOwned + Default,
    A: Serialize,
{
    let mut v = serde_json::to_value(C::default()).expect("serialisable defaults");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::new(format!("{}: {e}", path.display())))?;
        let from_file: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::new(format!("{}: {e}", path.display())))?;
        merge(&mut v, from_file);
    }
    merge(&mut v, serde_json::to_value(flags).expect("serialisable flags"));
    serde_json::from_value(v).map_err(|e| Failure::new(format!("invalid configuration: {e}")))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                b.insert(k, v);
            }
        }
        (b, o) => *b = o,
    }
}

pub fn write_resolved<C: Serialize>(path: &Path, cfg: &C) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::new(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(cfg).expect("serialisable config");
    std::fs::write(path, text + "\n").map_err(|e| Failure::new(format!("{}: {e}", path.display())))
}

/// Resolved-config path for a file output: `trace.jsonl` gives
/// `trace.resolved_config.json` in the same directory.
pub fn sibling_config_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.resolved_config.json"))
}

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

pub fn require(path: &Path, flag: &str) -> Result<(), Failure> {
    if path.as_os_str().is_empty() {
        return Err(Failure::new(format!("--{flag} is required")));
    }
    Ok(())
}

// gen-data

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objects_min: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objects_max: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_region_pixels: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub min_region_pixels: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::new(),
            seed: 0,
            n_train: 2000,
            n_test: 200,
            image_size: 64,
            num_classes: 10,
            objects_min: 2,
            objects_max: 5,
            min_region_pixels: 20,
        }
    }
}

// train-backbone

#[derive(Debug, Args, Serialize)]
pub struct TrainBackboneArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stem_channels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel_widths: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBackboneConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub stem_channels: usize,
    pub channel_widths: Vec<usize>,
}

impl Default for TrainBackboneConfig {
    fn default() -> Self {
        let p = segguide_core::backbone::PretrainConfig::default();
        let m = segguide_core::backbone::ModelConfig::default();
        Self {
            data: PathBuf::new(),
            out: PathBuf::new(),
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            seed: p.seed,
            stem_channels: m.stem_channels,
            channel_widths: m.channel_widths,
        }
    }
}

// train-guide

#[derive(Debug, Args, Serialize)]
pub struct TrainGuideArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// find, remove or find_or_remove.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hint_regime: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    /// spatio_semantic or channel_only.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    /// direct or residual_block.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wrapping: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_channels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gru_hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_seed: Option<u64>,
    /// Word vectors, one `word v1 ... v_dim` per line; hashed vectors otherwise.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_file: Option<PathBuf>,
    /// Query generator settings (JSON).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    /// Size of the held-out slice of the test split used by `eval_every`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_images: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainGuideConfig {
    pub data: PathBuf,
    pub backbone: PathBuf,
    pub out: PathBuf,
    pub hint_regime: String,
    pub split: String,
    pub variant: String,
    pub wrapping: String,
    pub residual_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub gru_hidden: usize,
    pub embedding_dim: usize,
    pub embedding_seed: u64,
    pub embedding_file: Option<PathBuf>,
    pub query_config: Option<PathBuf>,
    pub eval_every: usize,
    pub eval_images: usize,
}

impl Default for TrainGuideConfig {
    fn default() -> Self {
        let t = segguide_core::trainer::TrainConfig::default();
        Self {
            data: PathBuf::new(),
            backbone: PathBuf::new(),
            out: PathBuf::new(),
            hint_regime: t.hint_regime.as_str().into(),
            split: t.split,
            variant: "spatio_semantic".into(),
            wrapping: "direct".into(),
            residual_channels: t.mode.residual_channels,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: t.seed,
            gru_hidden: t.gru_hidden,
            embedding_dim: 50,
            embedding_seed: 0,
            embedding_file: None,
            query_config: None,
            eval_every: 0,
            eval_images: 50,
        }
    }
}

// eval

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
    /// guide_mode, split_location, hint_regime or num_hints.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis: Option<String>,
    /// Directory holding one trained guide per setting, named by setting.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guide_root: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub splits: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regimes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<String>>,
    /// Guide for the num_hints axis.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guide: Option<PathBuf>,
    /// Repeated hints for the num_hints axis.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hints: Option<usize>,
    /// Apply repeated hints on already guided features instead of swapping.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stacked: Option<bool>,
    /// Regime used on axes other than hint_regime.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub data: PathBuf,
    pub backbone: PathBuf,
    pub axis: String,
    pub guide_root: PathBuf,
    pub splits: Vec<String>,
    pub regimes: Vec<String>,
    pub modes: Vec<String>,
    pub guide: Option<PathBuf>,
    pub hints: usize,
    pub stacked: bool,
    pub regime: String,
    pub seeds: usize,
    pub query_config: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            backbone: PathBuf::new(),
            axis: "hint_regime".into(),
            guide_root: PathBuf::new(),
            splits: ["s1", "s2", "s3", "s4"].map(String::from).to_vec(),
            regimes: ["find", "find_or_remove", "remove"].map(String::from).to_vec(),
            modes: Vec::new(),
            guide: None,
            hints: 4,
            stacked: false,
            regime: "find".into(),
            seeds: 5,
            query_config: None,
            out: PathBuf::new(),
        }
    }
}

// guide-bp

#[derive(Debug, Args, Serialize)]
pub struct GuideBpArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub questions: Option<usize>,
    /// Number of test images; 0 means all.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_loss: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuideBpConfig {
    pub data: PathBuf,
    pub backbone: PathBuf,
    pub split: String,
    pub variant: String,
    pub questions: usize,
    pub images: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_iterations: usize,
    pub stop_loss: f64,
    pub out: PathBuf,
}

impl Default for GuideBpConfig {
    fn default() -> Self {
        let o = segguide_core::backprop::GuideOptConfig::default();
        Self {
            data: PathBuf::new(),
            backbone: PathBuf::new(),
            split: "s4".into(),
            variant: "spatio_semantic".into(),
            questions: 20,
            images: 0,
            learning_rate: o.learning_rate,
            momentum: o.momentum,
            max_iterations: o.max_iterations,
            stop_loss: o.stop_loss,
            out: PathBuf::new(),
        }
    }
}

// export-gamma

#[derive(Debug, Args, Serialize)]
pub struct ExportGammaArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guide: Option<PathBuf>,
    /// Backbone the guide was trained against; supplies the class names.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportGammaConfig {
    pub guide: PathBuf,
    pub backbone: PathBuf,
    pub template: String,
    pub out: PathBuf,
}

impl Default for ExportGammaConfig {
    fn default() -> Self {
        Self {
            guide: PathBuf::new(),
            backbone: PathBuf::new(),
            template: segguide_core::evaluation::CANONICAL_TEMPLATE.into(),
            out: PathBuf::new(),
        }
    }
}

// serve

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guide: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cors_origin: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub persist_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_upload_bytes: Option<usize>,
    /// Split for pixel hints when no guide is loaded.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    pub backbone: PathBuf,
    pub guide: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub cors_origin: Option<String>,
    pub persist_dir: Option<PathBuf>,
    pub max_upload_bytes: usize,
    pub split: String,
    pub learning_rate: f64,
    pub max_iterations: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        let o = segguide_core::backprop::GuideOptConfig::default();
        Self {
            backbone: PathBuf::new(),
            guide: None,
            host: "127.0.0.1".into(),
            port: 8080,
            cors_origin: None,
            persist_dir: None,
            max_upload_bytes: segguide_server::ServiceConfig::default().max_upload_bytes,
            split: "s4".into(),
            learning_rate: o.learning_rate,
            max_iterations: o.max_iterations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"seed": 5, "n_test": 7}"#).unwrap();
        let flags = GenDataArgs {
            config: None,
            out: Some("x".into()),
            seed: Some(9),
            n_train: None,
            n_test: None,
            image_size: None,
            num_classes: None,
            objects_min: None,
            objects_max: None,
            min_region_pixels: None,
        };
        let c: GenDataConfig = resolve(Some(&file), &flags).unwrap();
        assert_eq!((c.seed, c.n_test, c.n_train), (9, 7, 2000));
        assert_eq!(c.out, PathBuf::from("x"));
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"sede": 5}"#).unwrap();
        let flags = ExportGammaArgs {
            config: None,
            guide: None,
            backbone: None,
            template: None,
            out: None,
        };
        let err = resolve::<ExportGammaConfig, _>(Some(&file), &flags).unwrap_err();
        assert!(err.message.contains("sede"), "{}", err.message);
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(
            sibling_config_path(Path::new("runs/trace.jsonl")),
            PathBuf::from("runs/trace.resolved_config.json")
        );
    }
}
