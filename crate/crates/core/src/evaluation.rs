//! Guidance heatmaps, per-class gamma export and ablation reports.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::{EmbeddingTable, GuideModel};
use crate::nn::{Real, Resize2d};

/// Where the guide changed the features: per-position L2 norm of
/// `guided - base` over channels, bilinearly resized to `out` and min-max
/// normalised. No change gives an all-zero map.
pub fn guidance_heatmap<F: Real>(base: &Array3<F>, guided: &Array3<F>, out: (usize, usize)) -> Result<Array2<f32>> {
    if base.dim() != guided.dim() {
        return Err(Error::shape(format!("{:?}", base.dim()), format!("{:?}", guided.dim())));
    }
    let (h, w, _) = base.dim();
    let diff = guided - base;
    let norms = diff.map_axis(Axis(2), |px| px.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt());
    if norms.iter().all(|&v| v == 0.0) {
        return Ok(Array2::zeros(out));
    }
    let vol = norms.insert_axis(Axis(2));
    let up = Resize2d::new(h, w, out.0, out.1).forward(&vol).index_axis_move(Axis(2), 0);
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(if hi > lo {
        up.mapv(|v| ((v - lo) / (hi - lo)) as f32)
    } else {
        Array2::ones(out)
    })
}

/// 8-bit grayscale rendering of a heatmap in `[0, 1]`.
pub fn heatmap_image(map: &Array2<f32>) -> image::GrayImage {
    let (h, w) = map.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Canonical query used for gamma export.
pub const CANONICAL_TEMPLATE: &str = "find the {c}";

/// `gamma_s` predicted for the canonical find query of every class.
pub fn export_gamma_vectors(
    guide: &GuideModel<f32>,
    table: &EmbeddingTable,
    class_names: &[String],
    template: &str,
) -> Result<Vec<(String, Vec<f32>)>> {
    class_names
        .iter()
        .map(|name| {
            let text = crate::query::fill_template(template, name, None);
            Ok((name.clone(), guide.params_for_text(&text, table)?.gamma_s))
        })
        .collect()
}

pub fn gamma_csv(rows: &[(String, Vec<f32>)]) -> String {
    let width = rows.first().map_or(0, |r| r.1.len());
    let mut out = String::from("class");
    for i in 0..width {
        out.push_str(&format!(",g{i}"));
    }
    out.push('\n');
    for (name, v) in rows {
        out.push_str(name);
        for x in v {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    out
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity over all unordered pairs of rows.
pub fn mean_pairwise_similarity(rows: &[(String, Vec<f32>)]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            total += cosine_similarity(&rows[i].1, &rows[j].1);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    GuideMode,
    SplitLocation,
    HintRegime,
    NumHints,
}

impl AblationAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationAxis::GuideMode => "guide_mode",
            AblationAxis::SplitLocation => "split_location",
            AblationAxis::HintRegime => "hint_regime",
            AblationAxis::NumHints => "num_hints",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guide_mode" => Ok(AblationAxis::GuideMode),
            "split_location" => Ok(AblationAxis::SplitLocation),
            "hint_regime" => Ok(AblationAxis::HintRegime),
            "num_hints" => Ok(AblationAxis::NumHints),
            other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    /// Unguided mIoU on the same images, for reference.
    pub unguided_miou: f64,
    pub mean_miou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_miou: Option<f64>,
    pub per_seed: Vec<f64>,
}

impl AblationRow {
    pub fn from_runs(setting: &str, unguided_miou: f64, per_seed: Vec<f64>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::Empty(format!("no evaluation runs for `{setting}`")));
        }
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let std = (per_seed.len() > 1)
            .then(|| (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Ok(Self {
            setting: setting.to_string(),
            unguided_miou,
            mean_miou: mean,
            std_miou: std,
            per_seed,
        })
    }

    pub fn mean_gain(&self) -> f64 {
        self.mean_miou - self.unguided_miou
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub num_seeds: usize,
    /// mIoU averages over classes present in ground truth or prediction.
    pub miou_convention: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn new(axis: AblationAxis, num_seeds: usize, rows: Vec<AblationRow>) -> Result<Self> {
        if num_seeds == 0 {
            return Err(Error::Config("num_seeds must be at least 1".into()));
        }
        Ok(Self {
            axis,
            num_seeds,
            miou_convention: "classes absent from both ground truth and prediction are excluded".into(),
            rows,
        })
    }

    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# axis={} seeds={} miou: {}\nsetting,unguided_miou,mean_miou,std_miou",
            self.axis.as_str(),
            self.num_seeds,
            self.miou_convention
        );
        for i in 0..self.num_seeds {
            out.push_str(&format!(",seed{i}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{}",
                r.setting,
                r.unguided_miou,
                r.mean_miou,
                r.std_miou.map(|s| format!("{s:.6}")).unwrap_or_default()
            ));
            for v in &r.per_seed {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}
