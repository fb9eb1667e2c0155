//! Language guide: frozen word embeddings, a GRU sentence encoder and a
//! linear map from the final hidden state to guiding parameters.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{labels_and_posteriors, BackboneModel, HeadOutput, LabelMap};
use crate::checkpoint::{self, NamedTensor};
use crate::error::{Error, Result};
use crate::evaluation::guidance_heatmap;
use crate::guiding::{guided_backward, guided_forward, GuideMode, GuidingParams, ResidualWeights, Wrapping};
use crate::nn::{self, sigmoid, Real};

/// Lowercase, replace punctuation with spaces, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Where an embedding table comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Every word gets a vector derived from a seeded hash.
    Hashed { seed: u64 },
    /// Whitespace text file, one `word v1 ... v_dim` per line.
    File { path: String },
}

/// Frozen word vectors. Lookup is total: unknown words get a deterministic
/// hash vector scaled to the mean norm of the known vectors (`sqrt(dim)`
/// for a purely hashed table).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vocab: BTreeMap<String, Vec<f32>>,
    oov_seed: u64,
    oov_scale: f32,
    source: EmbeddingSource,
}

impl EmbeddingTable {
    pub fn hashed(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            vocab: BTreeMap::new(),
            oov_seed: seed,
            oov_scale: (dim as f32).sqrt(),
            source: EmbeddingSource::Hashed { seed },
        })
    }

    pub fn from_file(path: &Path, dim: usize) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = BTreeMap::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values = parts
                .map(|v| v.parse::<f32>().map_err(|e| parse_err(format!("bad value `{v}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != dim {
                return Err(parse_err(format!("expected {dim} values, found {}", values.len())));
            }
            vocab.insert(word.to_string(), values);
        }
        Self::from_vocab(vocab, dim, EmbeddingSource::File {
            path: path.display().to_string(),
        })
    }

    pub fn from_vocab(vocab: BTreeMap<String, Vec<f32>>, dim: usize, source: EmbeddingSource) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if let Some((w, v)) = vocab.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::shape(dim, format!("{} values for `{w}`", v.len())));
        }
        let norms: Vec<f64> = vocab
            .values()
            .map(|v| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt())
            .collect();
        let oov_scale = if norms.is_empty() {
            1.0
        } else {
            (norms.iter().sum::<f64>() / norms.len() as f64) as f32
        };
        Ok(Self {
            dim,
            vocab,
            oov_seed: 0,
            oov_scale,
            source,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn source(&self) -> &EmbeddingSource {
        &self.source
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vocab.contains_key(word)
    }

    pub fn lookup(&self, word: &str) -> Vec<f32> {
        if let Some(v) = self.vocab.get(word) {
            return v.clone();
        }
        let mut h = Sha256::new();
        h.update(self.oov_seed.to_le_bytes());
        h.update(word.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let raw: Vec<f64> = (0..self.dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        raw.iter().map(|x| (x / norm) as f32 * self.oov_scale).collect()
    }

    /// SHA-256 over the vocabulary, dimension and fallback policy.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update(self.oov_seed.to_le_bytes());
        h.update(self.oov_scale.to_le_bytes());
        for (w, v) in &self.vocab {
            h.update((w.len() as u64).to_le_bytes());
            h.update(w.as_bytes());
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        checkpoint::hex(&h.finalize())
    }
}

/// Gated recurrent unit, `h' = (1 - z) h + z tanh(W x + U (r * h) + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru<F = f32> {
    /// Input weights for the update, reset and candidate gates (`hidden x input`).
    pub w: [Array2<F>; 3],
    /// Recurrent weights (`hidden x hidden`).
    pub u: [Array2<F>; 3],
    pub b: [Array1<F>; 3],
}

const Z: usize = 0;
const R: usize = 1;
const N: usize = 2;

/// Activations of one recurrent step.
struct GruStep<F> {
    x: Array1<F>,
    h_prev: Array1<F>,
    z: Array1<F>,
    r: Array1<F>,
    n: Array1<F>,
    rh: Array1<F>,
}

pub struct GruTape<F> {
    steps: Vec<GruStep<F>>,
}

impl<F: Real> Gru<F> {
    pub fn new(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 1.0 / (hidden as f64).sqrt();
        let dist = Uniform::new(-k, k).expect("valid range");
        let mut mat = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || F::of(dist.sample(&mut rng)));
        let w = [mat(hidden, input), mat(hidden, input), mat(hidden, input)];
        let u = [mat(hidden, hidden), mat(hidden, hidden), mat(hidden, hidden)];
        let b = [Array1::zeros(hidden), Array1::zeros(hidden), Array1::zeros(hidden)];
        Self { w, u, b }
    }

    pub fn hidden(&self) -> usize {
        self.u[0].nrows()
    }

    pub fn input(&self) -> usize {
        self.w[0].ncols()
    }

    /// Run over `inputs` from a zero state; returns the final hidden state.
    pub fn forward(&self, inputs: &[Array1<F>]) -> Result<(Array1<F>, GruTape<F>)> {
        if inputs.is_empty() {
            return Err(Error::Empty("no tokens to encode".into()));
        }
        let mut h = Array1::zeros(self.hidden());
        let mut steps = Vec::with_capacity(inputs.len());
        for x in inputs {
            if x.len() != self.input() {
                return Err(Error::shape(self.input(), x.len()));
            }
            let z = (self.w[Z].dot(x) + self.u[Z].dot(&h) + &self.b[Z]).mapv(sigmoid);
            let r = (self.w[R].dot(x) + self.u[R].dot(&h) + &self.b[R]).mapv(sigmoid);
            let rh = &r * &h;
            let n = (self.w[N].dot(x) + self.u[N].dot(&rh) + &self.b[N]).mapv(|v| v.tanh());
            let next = (z.mapv(|v| F::one() - v)) * &h + &z * &n;
            steps.push(GruStep {
                x: x.clone(),
                h_prev: std::mem::replace(&mut h, next),
                z,
                r,
                n,
                rh,
            });
        }
        Ok((h, GruTape { steps }))
    }

    /// Back-propagation through time; weight gradients accumulate into `grads`.
    pub fn backward(&self, tape: &GruTape<F>, d_final: &Array1<F>, grads: &mut Gru<F>) {
        let outer = |a: &Array1<F>, b: &Array1<F>| {
            a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
        };
        let mut dh = d_final.clone();
        for s in tape.steps.iter().rev() {
            let dz = &dh * &(&s.n - &s.h_prev);
            let dn = &dh * &s.z;
            let mut dh_prev = &dh * &s.z.mapv(|v| F::one() - v);
            let da_n = dn * &s.n.mapv(|v| F::one() - v * v);
            grads.w[N] += &outer(&da_n, &s.x);
            grads.u[N] += &outer(&da_n, &s.rh);
            grads.b[N] += &da_n;
            let drh = self.u[N].t().dot(&da_n);
            let dr = &drh * &s.h_prev;
            dh_prev += &(&drh * &s.r);
            let da_r = dr * &s.r.mapv(|v| v * (F::one() - v));
            grads.w[R] += &outer(&da_r, &s.x);
            grads.u[R] += &outer(&da_r, &s.h_prev);
            grads.b[R] += &da_r;
            dh_prev += &self.u[R].t().dot(&da_r);
            let da_z = dz * &s.z.mapv(|v| v * (F::one() - v));
            grads.w[Z] += &outer(&da_z, &s.x);
            grads.u[Z] += &outer(&da_z, &s.h_prev);
            grads.b[Z] += &da_z;
            dh_prev += &self.u[Z].t().dot(&da_z);
            dh = dh_prev;
        }
    }

    pub fn params(&self) -> Vec<&[F]> {
        let mut v: Vec<&[F]> = Vec::new();
        for g in 0..3 {
            v.push(self.w[g].as_slice().expect("standard layout"));
            v.push(self.u[g].as_slice().expect("standard layout"));
            v.push(self.b[g].as_slice().expect("standard layout"));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let Gru { w, u, b } = self;
        let mut v: Vec<&mut [F]> = Vec::new();
        for ((wg, ug), bg) in w.iter_mut().zip(u.iter_mut()).zip(b.iter_mut()) {
            v.push(wg.as_slice_mut().expect("standard layout"));
            v.push(ug.as_slice_mut().expect("standard layout"));
            v.push(bg.as_slice_mut().expect("standard layout"));
        }
        v
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: self.w.clone().map(|a| Array2::zeros(a.dim())),
            u: self.u.clone().map(|a| Array2::zeros(a.dim())),
            b: self.b.clone().map(|a| Array1::zeros(a.dim())),
        }
    }

    pub fn cast<G: Real>(&self) -> Gru<G> {
        Gru {
            w: self.w.clone().map(|a| nn::cast_array(&a)),
            u: self.u.clone().map(|a| nn::cast_array(&a)),
            b: self.b.clone().map(|a| nn::cast_array(&a)),
        }
    }
}

/// Hyper-parameters fixed when a guide is created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideConfig {
    pub split: String,
    pub mode: GuideMode,
    pub gru_hidden: usize,
    pub embedding_dim: usize,
    /// Shape of the split's feature volume.
    pub feature_shape: [usize; 3],
}

/// Trainable text-to-guidance model.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideModel<F = f32> {
    config: GuideConfig,
    pub gru: Gru<F>,
    /// `output x hidden`, zero at initialisation.
    pub proj_w: Array2<F>,
    pub proj_b: Array1<F>,
    pub block: Option<ResidualWeights<F>>,
}

/// Everything needed to back-propagate one text query.
pub struct GuideTape<F> {
    gru: GruTape<F>,
    hidden: Array1<F>,
}

/// Output of [`GuideModel::guide_with_text`].
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedPrediction {
    pub labels: LabelMap,
    pub posteriors: Array3<f32>,
    pub params: GuidingParams<f32>,
    pub heatmap: Array2<f32>,
}

impl<F: Real> GuideModel<F> {
    pub fn new(config: GuideConfig, seed: u64) -> Result<Self> {
        config.mode.validate()?;
        if config.gru_hidden == 0 || config.embedding_dim == 0 {
            return Err(Error::Config("gru_hidden and embedding_dim must be positive".into()));
        }
        let [h, w, c] = config.feature_shape;
        let (la, lb, lg) = config.mode.param_lengths(h, w, c);
        let out = la + lb + 2 * lg;
        let block = (config.mode.wrapping == Wrapping::ResidualBlock)
            .then(|| ResidualWeights::new(c, config.mode.residual_channels, seed.wrapping_add(1)));
        Ok(Self {
            gru: Gru::new(config.embedding_dim, config.gru_hidden, seed),
            proj_w: Array2::zeros((out, config.gru_hidden)),
            proj_b: Array1::zeros(out),
            block,
            config,
        })
    }

    pub fn config(&self) -> &GuideConfig {
        &self.config
    }

    pub fn split(&self) -> &str {
        &self.config.split
    }

    pub fn mode(&self) -> &GuideMode {
        &self.config.mode
    }

    pub fn output_len(&self) -> usize {
        self.proj_b.len()
    }

    fn param_lengths(&self) -> (usize, usize, usize) {
        let [h, w, c] = self.config.feature_shape;
        self.config.mode.param_lengths(h, w, c)
    }

    pub fn zero_params(&self) -> GuidingParams<F> {
        let [h, w, c] = self.config.feature_shape;
        self.config.mode.zero_params(h, w, c)
    }

    pub fn embed(&self, tokens: &[String], table: &EmbeddingTable) -> Result<Vec<Array1<F>>> {
        if table.dim() != self.config.embedding_dim {
            return Err(Error::shape(self.config.embedding_dim, table.dim()));
        }
        Ok(tokens
            .iter()
            .map(|t| table.lookup(t).into_iter().map(|v| F::of(v as f64)).collect())
            .collect())
    }

    /// Final GRU state for a non-empty token list.
    pub fn encode_query(&self, tokens: &[String], table: &EmbeddingTable) -> Result<Array1<F>> {
        Ok(self.gru.forward(&self.embed(tokens, table)?)?.0)
    }

    /// Affine map from a hidden state to `alpha ++ beta ++ gamma_s ++ gamma_b`.
    pub fn project_guidance(&self, hidden: &Array1<F>) -> Result<GuidingParams<F>> {
        if hidden.len() != self.config.gru_hidden {
            return Err(Error::shape(self.config.gru_hidden, hidden.len()));
        }
        let flat = self.proj_w.dot(hidden) + &self.proj_b;
        let (la, lb, lg) = self.param_lengths();
        GuidingParams::from_flat(flat.as_slice().expect("contiguous"), la, lb, lg)
    }

    /// Parameters for free text; text without tokens yields zero parameters.
    pub fn params_for_text(&self, text: &str, table: &EmbeddingTable) -> Result<GuidingParams<F>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Ok(self.zero_params());
        }
        self.project_guidance(&self.encode_query(&tokens, table)?)
    }

    fn forward_tape(&self, tokens: &[String], table: &EmbeddingTable) -> Result<(GuidingParams<F>, GuideTape<F>)> {
        let (hidden, gru) = self.gru.forward(&self.embed(tokens, table)?)?;
        let params = self.project_guidance(&hidden)?;
        Ok((params, GuideTape { gru, hidden }))
    }

    fn backward_params(&self, tape: &GuideTape<F>, d_params: &GuidingParams<F>, grads: &mut GuideModel<F>) {
        let dp = Array1::from(d_params.to_flat());
        grads.proj_w += &dp.view().insert_axis(Axis(1)).dot(&tape.hidden.view().insert_axis(Axis(0)));
        grads.proj_b += &dp;
        let dh = self.proj_w.t().dot(&dp);
        self.gru.backward(&tape.gru, &dh, &mut grads.gru);
    }

    fn check_backbone(&self, backbone: &BackboneModel<F>, head: &HeadOutput<F>) -> Result<()> {
        let shape = backbone.config().split_shape(&self.config.split)?;
        if [shape.0, shape.1, shape.2] != self.config.feature_shape || head.split != self.config.split {
            return Err(Error::shape(
                format!("{:?} at {}", self.config.feature_shape, self.config.split),
                format!("{shape:?} at {}", head.split),
            ));
        }
        Ok(())
    }

    /// Tail logits for guided features.
    pub fn guided_logits(
        &self,
        backbone: &BackboneModel<F>,
        head: &HeadOutput<F>,
        params: &GuidingParams<F>,
    ) -> Result<(Array3<F>, Array3<F>)> {
        self.check_backbone(backbone, head)?;
        let (feat, _) = guided_forward(&head.features, params, &self.config.mode, self.block.as_ref())?;
        let logits = backbone.forward_tail(head, &feat)?;
        Ok((logits, feat))
    }

    /// Weighted cross-entropy of the text-guided prediction; gradients for
    /// the guide's own weights accumulate into `grads`. The backbone and the
    /// embeddings only supply values.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad(
        &self,
        backbone: &BackboneModel<F>,
        head: &HeadOutput<F>,
        tokens: &[String],
        table: &EmbeddingTable,
        targets: &LabelMap,
        weights: &Array2<F>,
        normaliser: F,
        grads: &mut GuideModel<F>,
    ) -> Result<f64> {
        self.check_backbone(backbone, head)?;
        let weights_only = |logits: &Array3<F>| nn::weighted_cross_entropy(logits, targets, weights, normaliser);
        if tokens.is_empty() {
            let logits = backbone.forward_tail(head, &head.features)?;
            return Ok(weights_only(&logits).loss.to_f64_lossy());
        }
        let (params, tape) = self.forward_tape(tokens, table)?;
        let (feat, gtape) = guided_forward(&head.features, &params, &self.config.mode, self.block.as_ref())?;
        let (logits, ttape) = backbone.forward_tail_tape(head, &feat)?;
        let ce = weights_only(&logits);
        let d_feat = backbone.backward_tail(&ttape, &ce.grad, None).features;
        let d_params = guided_backward(&gtape, &params, self.block.as_ref(), &d_feat, grads.block.as_mut())?;
        self.backward_params(&tape, &d_params, grads);
        Ok(ce.loss.to_f64_lossy())
    }

    pub fn params(&self) -> Vec<&[F]> {
        let mut v = self.gru.params();
        v.push(self.proj_w.as_slice().expect("standard layout"));
        v.push(self.proj_b.as_slice().expect("standard layout"));
        if let Some(b) = &self.block {
            v.extend(b.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut v = self.gru.params_mut();
        v.push(self.proj_w.as_slice_mut().expect("standard layout"));
        v.push(self.proj_b.as_slice_mut().expect("standard layout"));
        if let Some(b) = &mut self.block {
            v.extend(b.params_mut());
        }
        v
    }

    pub fn checksum(&self) -> String {
        checkpoint::checksum(self.params())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            gru: self.gru.zeros_like(),
            proj_w: Array2::zeros(self.proj_w.dim()),
            proj_b: Array1::zeros(self.proj_b.dim()),
            block: self.block.as_ref().map(|b| b.zeros_like()),
        }
    }

    pub fn cast<G: Real>(&self) -> GuideModel<G> {
        GuideModel {
            config: self.config.clone(),
            gru: self.gru.cast(),
            proj_w: nn::cast_array(&self.proj_w),
            proj_b: nn::cast_array(&self.proj_b),
            block: self.block.as_ref().map(|b| b.cast()),
        }
    }
}

pub const GUIDE_WEIGHTS_FILE: &str = "guide.bin";
pub const GUIDE_SIDECAR_FILE: &str = "guide.json";

/// JSON sidecar stored next to guide weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideSidecar {
    pub gru_hidden: usize,
    pub split: String,
    pub mode: GuideMode,
    pub embedding_dim: usize,
    pub vocab_hash: String,
    pub embedding: EmbeddingSource,
    pub feature_shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_checksum: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

impl GuideModel<f32> {
    /// Text-guided prediction from precomputed head activations.
    pub fn guide_with_text(
        &self,
        backbone: &BackboneModel<f32>,
        head: &HeadOutput<f32>,
        table: &EmbeddingTable,
        text: &str,
    ) -> Result<GuidedPrediction> {
        let params = self.params_for_text(text, table)?;
        self.guide_with_params(backbone, head, params)
    }

    pub fn guide_with_params(
        &self,
        backbone: &BackboneModel<f32>,
        head: &HeadOutput<f32>,
        params: GuidingParams<f32>,
    ) -> Result<GuidedPrediction> {
        let (logits, feat) = self.guided_logits(backbone, head, &params)?;
        let (labels, posteriors) = labels_and_posteriors(&logits);
        let (h, w) = labels.dim();
        let heatmap = guidance_heatmap(&head.features, &feat, (h, w))?;
        Ok(GuidedPrediction {
            labels,
            posteriors,
            params,
            heatmap,
        })
    }

    fn to_tensors(&self) -> Vec<NamedTensor> {
        let names = ["z", "r", "n"];
        let mut out = Vec::new();
        let mut push = |name: String, shape: &[usize], data: &[f32]| {
            out.push(NamedTensor {
                name,
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        };
        for (g, name) in names.iter().enumerate() {
            push(format!("gru.w_{name}"), self.gru.w[g].shape(), self.gru.w[g].as_slice().expect("std"));
            push(format!("gru.u_{name}"), self.gru.u[g].shape(), self.gru.u[g].as_slice().expect("std"));
            push(format!("gru.b_{name}"), self.gru.b[g].shape(), self.gru.b[g].as_slice().expect("std"));
        }
        push("proj.weight".into(), self.proj_w.shape(), self.proj_w.as_slice().expect("std"));
        push("proj.bias".into(), self.proj_b.shape(), self.proj_b.as_slice().expect("std"));
        if let Some(b) = &self.block {
            for (name, conv) in [("block.in", &b.proj_in), ("block.out", &b.proj_out)] {
                push(format!("{name}.weight"), conv.weight.shape(), conv.weight.as_slice().expect("std"));
                push(format!("{name}.bias"), conv.bias.shape(), conv.bias.as_slice().expect("std"));
            }
        }
        out
    }

    pub fn save(&self, dir: &Path, table: &EmbeddingTable, backbone_checksum: Option<String>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::write_tensors(&dir.join(GUIDE_WEIGHTS_FILE), &self.to_tensors())?;
        let sidecar = GuideSidecar {
            gru_hidden: self.config.gru_hidden,
            split: self.config.split.clone(),
            mode: self.config.mode,
            embedding_dim: self.config.embedding_dim,
            vocab_hash: table.checksum(),
            embedding: table.source().clone(),
            feature_shape: self.config.feature_shape,
            backbone_checksum,
            checksum: Some(self.checksum()),
        };
        checkpoint::write_json(&dir.join(GUIDE_SIDECAR_FILE), &sidecar)
    }

    /// Load a guide and rebuild its embedding table.
    pub fn load(dir: &Path) -> Result<(Self, EmbeddingTable, GuideSidecar)> {
        let sidecar: GuideSidecar = checkpoint::read_json(&dir.join(GUIDE_SIDECAR_FILE))?;
        let config = GuideConfig {
            split: sidecar.split.clone(),
            mode: sidecar.mode,
            gru_hidden: sidecar.gru_hidden,
            embedding_dim: sidecar.embedding_dim,
            feature_shape: sidecar.feature_shape,
        };
        let mut model = Self::new(config, 0)?;
        let mut tensors = checkpoint::read_tensors(&dir.join(GUIDE_WEIGHTS_FILE))?;
        let names = ["z", "r", "n"];
        for (g, name) in names.iter().enumerate() {
            let (hd, inp) = model.gru.w[g].dim();
            let w = checkpoint::take(&mut tensors, &format!("gru.w_{name}"), &[hd, inp])?;
            model.gru.w[g] = Array2::from_shape_vec((hd, inp), w).expect("checked");
            let u = checkpoint::take(&mut tensors, &format!("gru.u_{name}"), &[hd, hd])?;
            model.gru.u[g] = Array2::from_shape_vec((hd, hd), u).expect("checked");
            model.gru.b[g] = checkpoint::take(&mut tensors, &format!("gru.b_{name}"), &[hd])?.into();
        }
        let (o, hd) = model.proj_w.dim();
        model.proj_w = Array2::from_shape_vec((o, hd), checkpoint::take(&mut tensors, "proj.weight", &[o, hd])?)
            .expect("checked");
        model.proj_b = checkpoint::take(&mut tensors, "proj.bias", &[o])?.into();
        if let Some(b) = &mut model.block {
            for (name, conv) in [("block.in", &mut b.proj_in), ("block.out", &mut b.proj_out)] {
                let (r, c) = conv.weight.dim();
                let w = checkpoint::take(&mut tensors, &format!("{name}.weight"), &[r, c])?;
                conv.weight = Array2::from_shape_vec((r, c), w).expect("checked");
                conv.bias = checkpoint::take(&mut tensors, &format!("{name}.bias"), &[c])?.into();
            }
        }
        if let Some(extra) = tensors.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{}`", extra.name)));
        }
        let table = match &sidecar.embedding {
            EmbeddingSource::Hashed { seed } => EmbeddingTable::hashed(sidecar.embedding_dim, *seed)?,
            EmbeddingSource::File { path } => EmbeddingTable::from_file(Path::new(path), sidecar.embedding_dim)?,
        };
        if table.checksum() != sidecar.vocab_hash {
            return Err(Error::Checkpoint("embedding table does not match the guide's vocab_hash".into()));
        }
        Ok((model, table, sidecar))
    }
}
