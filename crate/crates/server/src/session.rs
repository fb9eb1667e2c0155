//! Interactive sessions: one image, the current guidance and the ordered
//! hint history that reproduces it.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::imageops::FilterType;
use image::RgbImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use segguide_core::backbone::{image_to_tensor, BackboneModel, HeadOutput, LabelMap};
use segguide_core::backprop::{params_ref, select_query_pixel, GuideOptConfig, Guider, PixelHint, QueryPixel};
use segguide_core::checkpoint;
use segguide_core::dataset::{image_to_label, label_to_image};
use segguide_core::evaluation::{guidance_heatmap, heatmap_image};
use segguide_core::guiding::{apply_guidance, GuideMode, GuidingParams, ResidualWeights};
use segguide_core::language::{EmbeddingTable, GuideModel};
use segguide_core::metrics::image_miou;

use crate::error::ApiError;

pub const SCHEMA_VERSION: u32 = 1;

/// Frozen checkpoints shared read-only by every session.
pub struct Models {
    pub backbone: BackboneModel<f32>,
    pub guide: Option<(GuideModel<f32>, EmbeddingTable)>,
    pub split: String,
    pub mode: GuideMode,
    pub opt: GuideOptConfig,
    block: Option<ResidualWeights<f32>>,
}

impl Models {
    /// With a guide, pixel hints use the guide's split and mode so text and
    /// pixel turns share one parameter set. Without one, `split`/`mode` apply.
    pub fn new(
        backbone: BackboneModel<f32>,
        guide: Option<(GuideModel<f32>, EmbeddingTable)>,
        split: &str,
        mode: GuideMode,
        opt: GuideOptConfig,
    ) -> segguide_core::Result<Self> {
        let (split, mode, block) = match &guide {
            Some((g, _)) => {
                let shape = backbone.config().split_shape(g.split())?;
                if g.config().feature_shape != [shape.0, shape.1, shape.2] {
                    return Err(segguide_core::Error::Config(format!(
                        "guide expects features {:?} but the backbone gives {:?} at {}",
                        g.config().feature_shape,
                        shape,
                        g.split()
                    )));
                }
                (g.split().to_string(), *g.mode(), g.block.clone())
            }
            None => {
                backbone.config().split_shape(split)?;
                mode.validate()?;
                let block = (mode.wrapping == segguide_core::guiding::Wrapping::ResidualBlock).then(|| {
                    let c = backbone.config().split_shape(split).expect("checked").2;
                    ResidualWeights::new(c, mode.residual_channels, 0)
                });
                (split.to_string(), mode, block)
            }
        };
        opt.validate()?;
        Ok(Self {
            backbone,
            guide,
            split,
            mode,
            opt,
            block,
        })
    }

    fn guider(&self) -> Guider<'_, f32> {
        let g = Guider::new(&self.backbone, &self.split, self.mode, self.opt).expect("validated at construction");
        match &self.block {
            Some(b) => g.with_block(b),
            None => g,
        }
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.backbone.config().input_size
    }

    pub fn checksums(&self) -> (String, Option<String>) {
        (self.backbone.checksum(), self.guide.as_ref().map(|(g, _)| g.checksum()))
    }
}

/// A user hint as submitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Hint {
    Text { text: String },
    Pixel { x: usize, y: usize, class_id: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(flatten)]
    pub hint: Hint,
    pub no_op: bool,
    pub changed_pixels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    pub params_ref: String,
    pub heatmap_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_trace: Option<Vec<f64>>,
}

/// Replayable form of a session: the input and its hint history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub schema_version: u32,
    pub session_id: String,
    pub created_at: u64,
    pub image_size: [usize; 2],
    /// Base64 PNG of the image at model resolution.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    pub turns: Vec<Turn>,
}

pub struct Session {
    pub id: String,
    pub created_at: u64,
    image: RgbImage,
    labels: Option<LabelMap>,
    head: HeadOutput<f32>,
    params: GuidingParams<f32>,
    hints: PixelHint,
    prediction: LabelMap,
    posteriors: Array3<f32>,
    heatmap: ndarray::Array2<f32>,
    turns: Vec<Turn>,
}

/// Result of one hint, before serialisation.
pub struct TurnOutcome<'a> {
    pub turn: &'a Turn,
    pub prediction: &'a LabelMap,
    pub heatmap_png: Vec<u8>,
    pub params: &'a GuidingParams<f32>,
}

pub fn png_bytes(img: image::DynamicImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG");
    out.into_inner()
}

/// Decode an uploaded image and bring it to model resolution.
pub fn decode_image(bytes: &[u8], size: (usize, usize)) -> Result<RgbImage, ApiError> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| ApiError::bad_request(format!("undecodable image: {e}")))?
        .to_rgb8();
    let (h, w) = size;
    Ok(if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    })
}

/// Decode a single-channel label PNG, nearest-resized to model resolution.
pub fn decode_labels(bytes: &[u8], size: (usize, usize)) -> Result<LabelMap, ApiError> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| ApiError::bad_request(format!("undecodable label map: {e}")))?
        .to_luma8();
    let (h, w) = size;
    let img = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Nearest)
    };
    Ok(image_to_label(&img))
}

fn changed(a: &LabelMap, b: &LabelMap) -> usize {
    a.iter().zip(b.iter()).filter(|(x, y)| x != y).count()
}

fn heatmap_ref(map: &ndarray::Array2<f32>) -> String {
    checkpoint::checksum([map.as_slice().expect("standard layout")])[..16].to_string()
}

impl Session {
    pub fn create(models: &Models, id: String, created_at: u64, image: RgbImage, labels: Option<LabelMap>) -> Result<Self, ApiError> {
        let size = models.input_size();
        if let Some(l) = &labels {
            if l.dim() != size {
                return Err(ApiError::unprocessable(format!("label map is {:?}, expected {size:?}", l.dim())));
            }
        }
        let x = image_to_tensor::<f32>(&image);
        let guider = models.guider();
        let head = guider.head(&x)?;
        let params = guider.zero_params();
        let (prediction, posteriors) = guider.predict(&head, &params)?;
        Ok(Self {
            id,
            created_at,
            image,
            labels,
            head,
            params,
            hints: PixelHint::default(),
            prediction,
            posteriors,
            heatmap: ndarray::Array2::zeros(size),
            turns: Vec::new(),
        })
    }

    pub fn prediction(&self) -> &LabelMap {
        &self.prediction
    }

    pub fn params(&self) -> &GuidingParams<f32> {
        &self.params
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn heatmap_png(&self) -> Vec<u8> {
        png_bytes(heatmap_image(&self.heatmap).into())
    }

    pub fn miou(&self, models: &Models) -> Option<f64> {
        let gt = self.labels.as_ref()?;
        image_miou(&self.prediction, gt, models.backbone.num_classes()).ok()
    }

    fn update(&mut self, models: &Models, params: GuidingParams<f32>) -> Result<usize, ApiError> {
        let guider = models.guider();
        let (labels, post) = guider.predict(&self.head, &params)?;
        let feat = apply_guidance(&self.head.features, &params, &models.mode, models.block.as_ref())?;
        self.heatmap = guidance_heatmap(&self.head.features, &feat, labels.dim())?;
        let n = changed(&labels, &self.prediction);
        self.params = params;
        self.prediction = labels;
        self.posteriors = post;
        Ok(n)
    }

    fn push_turn(&mut self, models: &Models, hint: Hint, no_op: bool, changed_pixels: usize, loss_trace: Option<Vec<f64>>) -> TurnOutcome<'_> {
        let turn = Turn {
            hint,
            no_op,
            changed_pixels,
            miou: self.miou(models),
            params_ref: params_ref(&self.params),
            heatmap_ref: heatmap_ref(&self.heatmap),
            loss_trace,
        };
        self.turns.push(turn);
        TurnOutcome {
            turn: self.turns.last().expect("just pushed"),
            prediction: &self.prediction,
            heatmap_png: png_bytes(heatmap_image(&self.heatmap).into()),
            params: &self.params,
        }
    }

    /// Text guidance. New parameters replace the current ones and act on
    /// the original head features. Empty text is recorded as a no-op.
    pub fn text_hint(&mut self, models: &Models, text: &str) -> Result<TurnOutcome<'_>, ApiError> {
        let hint = Hint::Text { text: text.to_string() };
        if text.trim().is_empty() {
            return Ok(self.push_turn(models, hint, true, 0, None));
        }
        let (guide, table) = models
            .guide
            .as_ref()
            .ok_or_else(|| ApiError::conflict("no language guide is loaded"))?;
        let params = guide.params_for_text(text, table)?;
        let n = self.update(models, params)?;
        Ok(self.push_turn(models, hint, false, n, None))
    }

    /// Pixel guidance over all pixel hints so far, warm-started from the
    /// current parameters.
    pub fn pixel_hint(&mut self, models: &Models, x: usize, y: usize, class_id: u8) -> Result<TurnOutcome<'_>, ApiError> {
        let size = self.prediction.dim();
        let nc = models.backbone.num_classes();
        let mut hints = self.hints.clone();
        hints
            .push((y, x), class_id, size, nc)
            .map_err(|e| ApiError::unprocessable(e.to_string()))?;
        let fit = models.guider().optimize(&self.head, &hints, Some(&self.params))?;
        self.hints = hints;
        let n = self.update(models, fit.params)?;
        Ok(self.push_turn(models, Hint::Pixel { x, y, class_id }, false, n, Some(fit.loss_trace)))
    }

    /// Least certain pixel not yet hinted.
    pub fn suggest_pixel(&self) -> Result<QueryPixel, ApiError> {
        let asked = self.hints.positions.iter().copied().collect();
        select_query_pixel(&self.posteriors, &asked).map_err(|_| ApiError::conflict("every pixel has already been hinted"))
    }

    /// Drop all guidance and history, keeping the image.
    pub fn reset(&mut self, models: &Models) -> Result<(), ApiError> {
        let zero = models.guider().zero_params();
        self.update(models, zero)?;
        self.heatmap.fill(0.0);
        self.hints = PixelHint::default();
        self.turns.clear();
        Ok(())
    }

    pub fn record(&self) -> SessionRecord {
        let (h, w) = self.prediction.dim();
        SessionRecord {
            schema_version: SCHEMA_VERSION,
            session_id: self.id.clone(),
            created_at: self.created_at,
            image_size: [h, w],
            image: B64.encode(png_bytes(self.image.clone().into())),
            labels: self.labels.as_ref().map(|l| B64.encode(png_bytes(label_to_image(l).into()))),
            turns: self.turns.clone(),
        }
    }

    /// Rebuild a session by re-applying its hints in order. Fails if any turn
    /// does not reproduce its recorded parameters.
    pub fn replay(models: &Models, record: &SessionRecord) -> Result<Self, ApiError> {
        if record.schema_version != SCHEMA_VERSION {
            return Err(ApiError::unprocessable(format!("unsupported schema_version {}", record.schema_version)));
        }
        let size = models.input_size();
        if record.image_size != [size.0, size.1] {
            return Err(ApiError::unprocessable("recorded image size does not match the model"));
        }
        let b64 = |s: &str| B64.decode(s).map_err(|e| ApiError::bad_request(format!("bad base64: {e}")));
        let image = decode_image(&b64(&record.image)?, size)?;
        let labels = record.labels.as_deref().map(|l| decode_labels(&b64(l)?, size)).transpose()?;
        let mut s = Self::create(models, record.session_id.clone(), record.created_at, image, labels)?;
        for (i, turn) in record.turns.iter().enumerate() {
            let out = match &turn.hint {
                Hint::Text { text } => s.text_hint(models, text)?,
                Hint::Pixel { x, y, class_id } => s.pixel_hint(models, *x, *y, *class_id)?,
            };
            if out.turn.params_ref != turn.params_ref {
                return Err(ApiError::conflict(format!("replay diverged at turn {i}")));
            }
        }
        Ok(s)
    }
}
