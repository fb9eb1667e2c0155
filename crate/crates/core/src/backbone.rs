//! Small encoder–decoder segmentation network with named split points.
//!
//! ```text
//! image ─ stem ─ s1 ─ s2 ─ … ─ sN            (stride-2 encoder stages)
//!                 │    │        │
//!                 d1 ← d2 ← … ← dN = sN       (bilinear up + 3×3 conv + 1×1 lateral)
//!                 │
//!            classifier → bilinear ×2 → logits
//! ```
//!
//! A split at `sK` cuts the graph after encoder stage `K`: the head returns the
//! stage-K activation plus the shallower skip activations, the tail consumes
//! them. The guiding block sits on the stage-K activation only.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedTensor};
use crate::dataset::{Sample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::nn::{self, relu, relu_backward, Adam, Conv2d, ConvCache, Real, Resize2d};

/// Activation volume `H × W × C`.
pub type FeatureMap<F = f32> = Array3<F>;
/// Per-pixel class indices; [`IGNORE_LABEL`] marks unlabelled pixels.
pub type LabelMap = Array2<u8>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: (usize, usize),
    pub num_classes: usize,
    pub stem_channels: usize,
    /// Output channels of each stride-2 encoder stage.
    pub channel_widths: Vec<usize>,
    /// Names of the stage outputs the guiding block may be inserted at,
    /// ordered from input-near to output-near.
    pub split_points: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            num_classes: 10,
            stem_channels: 16,
            channel_widths: vec![16, 32, 64, 64],
            split_points: ["s1", "s2", "s3", "s4"].map(String::from).to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.channel_widths.len();
        if self.num_classes < 2 || self.num_classes > IGNORE_LABEL as usize {
            return Err(Error::Config(format!("num_classes must be in 2..255, got {}", self.num_classes)));
        }
        if self.stem_channels == 0 || self.channel_widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.split_points.len() < 3 {
            return Err(Error::Config(format!(
                "at least 3 split points are required, got {}",
                self.split_points.len()
            )));
        }
        let (h, w) = self.input_size;
        let factor = 1usize << n;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by {factor} for {n} stages"
            )));
        }
        let mut prev = 0;
        for name in &self.split_points {
            let level = parse_split(name)?;
            if level > n {
                return Err(Error::Config(format!(
                    "split point `{name}` needs {level} stages but channel_widths has {n}"
                )));
            }
            if level <= prev {
                return Err(Error::Config("split points must be strictly ordered input to output".into()));
            }
            let (sh, sw, _) = self.level_shape(level);
            if sh < 4 || sw < 4 {
                return Err(Error::Config(format!("split `{name}` would be {sh}x{sw}, below 4x4")));
            }
            prev = level;
        }
        Ok(())
    }

    /// Encoder level of a configured split point.
    pub fn level_of(&self, split: &str) -> Result<usize> {
        if !self.split_points.iter().any(|s| s == split) {
            return Err(Error::UnknownSplit(split.to_string()));
        }
        parse_split(split)
    }

    pub fn level_shape(&self, level: usize) -> (usize, usize, usize) {
        let (h, w) = self.input_size;
        if level == 0 {
            return (h, w, self.stem_channels);
        }
        (h >> level, w >> level, self.channel_widths[level - 1])
    }

    pub fn split_shape(&self, split: &str) -> Result<(usize, usize, usize)> {
        Ok(self.level_shape(self.level_of(split)?))
    }

    pub fn split_shapes(&self) -> BTreeMap<String, [usize; 3]> {
        self.split_points
            .iter()
            .map(|s| {
                let (h, w, c) = self.level_shape(parse_split(s).expect("validated"));
                (s.clone(), [h, w, c])
            })
            .collect()
    }
}

fn parse_split(name: &str) -> Result<usize> {
    name.strip_prefix('s')
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::UnknownSplit(name.to_string()))
}

/// One row of the realised architecture table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub output_shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderStage<F> {
    down: Conv2d<F>,
    conv: Conv2d<F>,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderStage<F> {
    up: Conv2d<F>,
    lateral: Conv2d<F>,
}

/// Output of [`BackboneModel::forward_head`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<F = f32> {
    pub split: String,
    level: usize,
    /// Activation at the split point (the volume the guiding block modulates).
    pub features: FeatureMap<F>,
    /// Shallower encoder activations consumed by decoder skip connections.
    pub skips: Vec<Array3<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel<F = f32> {
    config: ModelConfig,
    class_names: Vec<String>,
    stem: Conv2d<F>,
    stages: Vec<EncoderStage<F>>,
    /// `decoder[i - 1]` produces decoder level `i`, for `i` in `1..N`.
    decoder: Vec<DecoderStage<F>>,
    classifier: Conv2d<F>,
}

struct StageTape<F> {
    down: ConvCache<F>,
    mid: Array3<F>,
    conv: ConvCache<F>,
    out: Array3<F>,
}

struct DecoderTape<F> {
    up: ConvCache<F>,
    lateral: ConvCache<F>,
    out: Array3<F>,
}

/// Saved activations for differentiating the tail.
pub struct TailTape<F> {
    from: usize,
    stages: Vec<StageTape<F>>,
    decoder: Vec<DecoderTape<F>>,
    classifier: ConvCache<F>,
    level_dims: Vec<(usize, usize, usize)>,
}

/// Gradients of the tail with respect to its inputs.
pub struct TailGrad<F> {
    pub features: Array3<F>,
    pub skips: Vec<Array3<F>>,
}

impl<F: Real> BackboneModel<F> {
    pub fn new(config: ModelConfig, class_names: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if class_names.len() != config.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                class_names.len(),
                config.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::new(3, config.stem_channels, 3, 1, &mut rng);
        let mut stages = Vec::new();
        let mut cin = config.stem_channels;
        for &c in &config.channel_widths {
            stages.push(EncoderStage {
                down: Conv2d::new(cin, c, 3, 2, &mut rng),
                conv: Conv2d::new(c, c, 3, 1, &mut rng),
            });
            cin = c;
        }
        let n = config.channel_widths.len();
        let decoder = (1..n)
            .map(|i| DecoderStage {
                up: Conv2d::new(config.channel_widths[i], config.channel_widths[i - 1], 3, 1, &mut rng),
                lateral: Conv2d::new(config.channel_widths[i - 1], config.channel_widths[i - 1], 1, 1, &mut rng),
            })
            .collect();
        let classifier = Conv2d::new(config.channel_widths[0], config.num_classes, 1, 1, &mut rng);
        Ok(Self {
            config,
            class_names,
            stem,
            stages,
            decoder,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn architecture(&self) -> Vec<LayerInfo> {
        let mut rows = vec![LayerInfo {
            name: "stem".into(),
            output_shape: self.config.level_shape(0).into(),
        }];
        for i in 1..=self.stages.len() {
            rows.push(LayerInfo {
                name: format!("s{i}"),
                output_shape: self.config.level_shape(i).into(),
            });
        }
        for i in (1..self.stages.len()).rev() {
            rows.push(LayerInfo {
                name: format!("d{i}"),
                output_shape: self.config.level_shape(i).into(),
            });
        }
        let (h, w) = self.config.input_size;
        rows.push(LayerInfo {
            name: "logits".into(),
            output_shape: [h, w, self.config.num_classes],
        });
        rows
    }

    fn check_input(&self, x: &Array3<F>) -> Result<()> {
        let (h, w) = self.config.input_size;
        if x.dim() != (h, w, 3) {
            return Err(Error::shape(format!("({h}, {w}, 3)"), format!("{:?}", x.dim())));
        }
        Ok(())
    }

    fn run_stem(&self, x: &Array3<F>) -> Array3<F> {
        relu(self.stem.apply(x))
    }

    pub fn forward_head(&self, x: &Array3<F>, split: &str) -> Result<HeadOutput<F>> {
        self.check_input(x)?;
        let level = self.config.level_of(split)?;
        let mut act = self.run_stem(x);
        let mut skips = Vec::with_capacity(level.saturating_sub(1));
        for stage in &self.stages[..level] {
            let next = relu(stage.conv.apply(&relu(stage.down.apply(&act))));
            skips.push(std::mem::replace(&mut act, next));
        }
        // the first pushed value is the stem output, which the decoder never reads
        skips.remove(0);
        Ok(HeadOutput {
            split: split.to_string(),
            level,
            features: act,
            skips,
        })
    }

    /// Run the tail on `features` (usually the head's features after guiding)
    /// together with the head's skip activations.
    pub fn forward_tail(&self, head: &HeadOutput<F>, features: &FeatureMap<F>) -> Result<Array3<F>> {
        self.check_tail_input(head, features)?;
        Ok(self.run_tail(head.level, features, &head.skips, false).0)
    }

    pub fn forward_tail_tape(
        &self,
        head: &HeadOutput<F>,
        features: &FeatureMap<F>,
    ) -> Result<(Array3<F>, TailTape<F>)> {
        self.check_tail_input(head, features)?;
        let (logits, tape) = self.run_tail(head.level, features, &head.skips, true);
        Ok((logits, tape.expect("recorded")))
    }

    fn check_tail_input(&self, head: &HeadOutput<F>, features: &FeatureMap<F>) -> Result<()> {
        let level = self.config.level_of(&head.split)?;
        let want = self.config.level_shape(level);
        if features.dim() != want || head.level != level {
            return Err(Error::shape(
                format!("{want:?} for split {}", head.split),
                format!("{:?}", features.dim()),
            ));
        }
        for (i, s) in head.skips.iter().enumerate() {
            if s.dim() != self.config.level_shape(i + 1) {
                return Err(Error::shape(
                    format!("{:?}", self.config.level_shape(i + 1)),
                    format!("skip {} with {:?}", i + 1, s.dim()),
                ));
            }
        }
        if head.skips.len() != level.saturating_sub(1) {
            return Err(Error::shape(format!("{} skips", level - 1), head.skips.len()));
        }
        Ok(())
    }

    /// Full network: `forward_tail(forward_head(x, s))` for the last split.
    pub fn forward(&self, x: &Array3<F>) -> Result<Array3<F>> {
        let split = self.config.split_points.last().expect("validated").clone();
        let head = self.forward_head(x, &split)?;
        self.forward_tail(&head, &head.features)
    }

    /// Arg-max labels and softmax posteriors.
    pub fn predict(&self, x: &Array3<F>) -> Result<(LabelMap, Array3<F>)> {
        Ok(labels_and_posteriors(&self.forward(x)?))
    }

    fn run_tail(
        &self,
        from: usize,
        features: &Array3<F>,
        skips: &[Array3<F>],
        record: bool,
    ) -> (Array3<F>, Option<TailTape<F>>) {
        let n = self.stages.len();
        let mut stage_tapes = Vec::new();
        let mut computed: Vec<Array3<F>> = Vec::with_capacity(n - from);
        for level in from + 1..=n {
            let stage = &self.stages[level - 1];
            let input = computed.last().unwrap_or(features);
            let (y1, c1) = stage.down.forward(input);
            let mid = relu(y1);
            let (y2, c2) = stage.conv.forward(&mid);
            let out = relu(y2);
            if record {
                stage_tapes.push(StageTape {
                    down: c1,
                    mid,
                    conv: c2,
                    out: out.clone(),
                });
            }
            computed.push(out);
        }
        let level_ref = |i: usize| -> &Array3<F> {
            match i.cmp(&from) {
                std::cmp::Ordering::Less => &skips[i - 1],
                std::cmp::Ordering::Equal => features,
                std::cmp::Ordering::Greater => &computed[i - from - 1],
            }
        };
        let mut dec_tapes: Vec<DecoderTape<F>> = Vec::new();
        let mut current: Array3<F> = level_ref(n).clone();
        for i in (1..n).rev() {
            let stage = &self.decoder[i - 1];
            let lateral_in = level_ref(i);
            let (h, w, _) = lateral_in.dim();
            let (ph, pw, _) = current.dim();
            let up_in = Resize2d::new(ph, pw, h, w).forward(&current);
            let (u, cu) = stage.up.forward(&up_in);
            let (l, cl) = stage.lateral.forward(lateral_in);
            let out = relu(u + l);
            if record {
                dec_tapes.push(DecoderTape {
                    up: cu,
                    lateral: cl,
                    out: out.clone(),
                });
            }
            current = out;
        }
        let (small, cc) = self.classifier.forward(&current);
        let (sh, sw, _) = small.dim();
        let (h, w) = self.config.input_size;
        let logits = Resize2d::new(sh, sw, h, w).forward(&small);
        let tape = record.then(|| TailTape {
            from,
            stages: stage_tapes,
            decoder: dec_tapes,
            classifier: cc,
            level_dims: (0..=n).map(|l| self.config.level_shape(l)).collect(),
        });
        (logits, tape)
    }

    /// Back-propagate `grad_logits` through the tail. Weight gradients are
    /// accumulated into `grads` (a [`BackboneModel::zeros_like`] buffer) when given.
    pub fn backward_tail(
        &self,
        tape: &TailTape<F>,
        grad_logits: &Array3<F>,
        mut grads: Option<&mut BackboneModel<F>>,
    ) -> TailGrad<F> {
        let n = self.stages.len();
        let from = tape.from;
        let (h1, w1, _) = tape.level_dims[1];
        let (h, w) = self.config.input_size;
        let d_small = Resize2d::new(h1, w1, h, w).backward(grad_logits);
        let mut d_dec = self
            .classifier
            .backward(&tape.classifier, &d_small, grads.as_mut().map(|g| &mut g.classifier));

        let mut d_levels: Vec<Option<Array3<F>>> = vec![None; n + 1];
        let add = |slot: &mut Option<Array3<F>>, g: Array3<F>| match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        };
        // decoder tapes were recorded from level n-1 down to 1
        for i in 1..n {
            let dt = &tape.decoder[n - 1 - i];
            let stage = &self.decoder[i - 1];
            let g = relu_backward(&dt.out, d_dec);
            let d_up_in = stage
                .up
                .backward(&dt.up, &g, grads.as_mut().map(|gr| &mut gr.decoder[i - 1].up));
            let d_lat = stage
                .lateral
                .backward(&dt.lateral, &g, grads.as_mut().map(|gr| &mut gr.decoder[i - 1].lateral));
            add(&mut d_levels[i], d_lat);
            let (ph, pw, _) = tape.level_dims[i + 1];
            let (ch, cw, _) = tape.level_dims[i];
            d_dec = Resize2d::new(ph, pw, ch, cw).backward(&d_up_in);
        }
        add(&mut d_levels[n], d_dec);

        for level in (from + 1..=n).rev() {
            let st = &tape.stages[level - from - 1];
            let stage = &self.stages[level - 1];
            let g_out = d_levels[level].take().expect("gradient reaches every computed level");
            let g2 = relu_backward(&st.out, g_out);
            let g_mid = stage
                .conv
                .backward(&st.conv, &g2, grads.as_mut().map(|gr| &mut gr.stages[level - 1].conv));
            let g1 = relu_backward(&st.mid, g_mid);
            let g_in = stage
                .down
                .backward(&st.down, &g1, grads.as_mut().map(|gr| &mut gr.stages[level - 1].down));
            add(&mut d_levels[level - 1], g_in);
        }
        let zeros = |l: usize| Array3::zeros(tape.level_dims[l]);
        let features = d_levels[from].take().unwrap_or_else(|| zeros(from));
        let skips = (1..from)
            .map(|l| d_levels[l].take().unwrap_or_else(|| zeros(l)))
            .collect();
        TailGrad { features, skips }
    }

    /// Loss and gradients of the pixel-mean cross-entropy (ignore-aware) for
    /// one labelled image.
    pub fn loss_and_grad(&self, x: &Array3<F>, labels: &LabelMap, grads: &mut BackboneModel<F>) -> Result<f64> {
        self.check_input(x)?;
        let (y, stem_cache) = self.stem.forward(x);
        let stem_out = relu(y);
        let (logits, tape) = self.run_tail(0, &stem_out, &[], true);
        let tape = tape.expect("recorded");
        let weights = labels.mapv(|l| if l == IGNORE_LABEL { F::zero() } else { F::one() });
        let count = weights.iter().filter(|&&w| w > F::zero()).count().max(1);
        let targets = labels.mapv(|l| if l == IGNORE_LABEL { 0 } else { l });
        let ce = nn::weighted_cross_entropy(&logits, &targets, &weights, F::of(count as f64));
        let d = self.backward_tail(&tape, &ce.grad, Some(grads));
        let g = relu_backward(&stem_out, d.features);
        self.stem.backward(&stem_cache, &g, Some(&mut grads.stem));
        Ok(ce.loss.to_f64_lossy())
    }

    fn convs(&self) -> Vec<(String, &Conv2d<F>)> {
        let mut out = vec![("stem".to_string(), &self.stem)];
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{}.down", i + 1), &s.down));
            out.push((format!("stage{}.conv", i + 1), &s.conv));
        }
        for (i, d) in self.decoder.iter().enumerate() {
            out.push((format!("decoder{}.up", i + 1), &d.up));
            out.push((format!("decoder{}.lateral", i + 1), &d.lateral));
        }
        out.push(("classifier".to_string(), &self.classifier));
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d<F>> {
        let mut out = vec![&mut self.stem];
        for s in &mut self.stages {
            out.push(&mut s.down);
            out.push(&mut s.conv);
        }
        for d in &mut self.decoder {
            out.push(&mut d.up);
            out.push(&mut d.lateral);
        }
        out.push(&mut self.classifier);
        out
    }

    pub fn params(&self) -> Vec<&[F]> {
        self.convs().into_iter().flat_map(|(_, c)| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        self.convs_mut().into_iter().flat_map(|c| c.params_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// SHA-256 of all weights; unchanged by any guiding operation.
    pub fn checksum(&self) -> String {
        checkpoint::checksum(self.params())
    }

    /// Same architecture with every weight set to zero (gradient buffer).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.iter_mut().for_each(|v| *v = F::zero());
        }
        z
    }

    pub fn cast<G: Real>(&self) -> BackboneModel<G> {
        BackboneModel {
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            stem: self.stem.cast(),
            stages: self
                .stages
                .iter()
                .map(|s| EncoderStage {
                    down: s.down.cast(),
                    conv: s.conv.cast(),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|d| DecoderStage {
                    up: d.up.cast(),
                    lateral: d.lateral.cast(),
                })
                .collect(),
            classifier: self.classifier.cast(),
        }
    }
}

/// Arg-max labels and softmax posteriors of a logit volume.
pub fn labels_and_posteriors<F: Real>(logits: &Array3<F>) -> (LabelMap, Array3<F>) {
    let post = nn::softmax_pixels(logits);
    let labels = post.map_axis(Axis(2), |p| {
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        best as u8
    });
    (labels, post)
}

/// Map an 8-bit RGB image onto the network's input range.
pub fn image_to_tensor<F: Real>(rgb: &image::RgbImage) -> Array3<F> {
    let (w, h) = rgb.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        let v = rgb.get_pixel(x as u32, y as u32)[c] as f64;
        F::of((v / 255.0 - 0.5) * 4.0)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

impl BackboneModel<f32> {
    /// Supervised pre-training with Adam; returns the mean loss per epoch.
    pub fn pretrain(
        &mut self,
        samples: &[Sample],
        cfg: &PretrainConfig,
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(Error::Empty("no training samples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = Adam::new(cfg.learning_rate);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let mut grads = self.zeros_like();
                for &i in batch {
                    let loss = self.loss_and_grad(&samples[i].image, &samples[i].labels, &mut grads)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!("backbone loss at epoch {epoch}")));
                    }
                    total += loss;
                }
                let scale = 1.0 / batch.len() as f64;
                opt.step(self.params_mut(), grads.params(), scale);
            }
            let mean = total / samples.len() as f64;
            tracing::debug!(epoch, loss = mean, "backbone epoch");
            on_epoch(epoch, mean);
            history.push(mean);
        }
        Ok(history)
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (name, conv) in self.convs() {
            out.push(NamedTensor {
                name: format!("{name}.weight"),
                shape: conv.weight.shape().to_vec(),
                data: conv.weight.iter().copied().collect(),
            });
            out.push(NamedTensor {
                name: format!("{name}.bias"),
                shape: conv.bias.shape().to_vec(),
                data: conv.bias.to_vec(),
            });
        }
        out
    }

    fn load_tensors(&mut self, mut tensors: Vec<NamedTensor>) -> Result<()> {
        let names: Vec<String> = self.convs().into_iter().map(|(n, _)| n).collect();
        for (name, conv) in names.into_iter().zip(self.convs_mut()) {
            let wshape = conv.weight.shape().to_vec();
            let w = checkpoint::take(&mut tensors, &format!("{name}.weight"), &wshape)?;
            conv.weight = Array2::from_shape_vec((wshape[0], wshape[1]), w).expect("checked shape");
            let b = checkpoint::take(&mut tensors, &format!("{name}.bias"), &[conv.bias.len()])?;
            conv.bias = b.into();
        }
        if let Some(extra) = tensors.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{}`", extra.name)));
        }
        Ok(())
    }

    /// Write `weights.bin` and the `model.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path, train_miou: Option<f64>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::write_tensors(&dir.join(WEIGHTS_FILE), &self.to_tensors())?;
        let sidecar = BackboneSidecar {
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            split_shapes: self.config.split_shapes(),
            train_miou,
            checksum: Some(self.checksum()),
        };
        checkpoint::write_json(&dir.join(SIDECAR_FILE), &sidecar)
    }

    pub fn load(dir: &Path) -> Result<(Self, BackboneSidecar)> {
        let sidecar: BackboneSidecar = checkpoint::read_json(&dir.join(SIDECAR_FILE))?;
        if sidecar.split_shapes != sidecar.config.split_shapes() {
            return Err(Error::Checkpoint("sidecar split_shapes disagree with config".into()));
        }
        let mut model = Self::new(sidecar.config.clone(), sidecar.class_names.clone(), 0)?;
        model.load_tensors(checkpoint::read_tensors(&dir.join(WEIGHTS_FILE))?)?;
        Ok((model, sidecar))
    }
}

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const SIDECAR_FILE: &str = "model.json";

/// JSON sidecar stored next to backbone weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSidecar {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub split_shapes: BTreeMap<String, [usize; 3]>,
    pub train_miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}
