//! Deterministic "shapes world" segmentation scenes.
//!
//! Every scene is a sky/grass backdrop split by a sloped horizon with a few
//! objects on top. Three earth-like classes (sand, mud, stone) share shape
//! family and overlapping colour ranges, and clouds differ from the sky only
//! by a small brightness lift, so a small network plateaus below its ceiling
//! on them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{image_to_tensor, LabelMap};
use crate::error::{Error, Result};

/// Label value for pixels excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Full class catalogue; a scene config with `num_classes = k` uses the first `k`.
pub const CLASS_CATALOGUE: [&str; 10] = [
    "sky", "grass", "sand", "mud", "ball", "box", "tree", "wall", "stone", "cloud",
];

const SKY: u8 = 0;
const GRASS: u8 = 1;
const SAND: u8 = 2;
const MUD: u8 = 3;
const BALL: u8 = 4;
const BOX: u8 = 5;
const TREE: u8 = 6;
const WALL: u8 = 7;
const STONE: u8 = 8;
const CLOUD: u8 = 9;

const CONFUSABLE: [(u8, u8); 4] = [(SAND, MUD), (MUD, STONE), (SAND, STONE), (SKY, CLOUD)];

/// Offset between train and test scene indices so the test set does not
/// depend on the number of training scenes.
const TEST_INDEX_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: (usize, usize),
    pub num_classes: usize,
    /// Inclusive range of objects placed per scene.
    pub objects_per_scene: (usize, usize),
    pub seed: u64,
    /// Every placed object keeps at least this many labelled pixels.
    pub min_region_pixels: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            num_classes: 10,
            objects_per_scene: (2, 5),
            seed: 0,
            min_region_pixels: 20,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(4..=CLASS_CATALOGUE.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 4..={}, got {}",
                CLASS_CATALOGUE.len(),
                self.num_classes
            )));
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::Config(format!("image size {h}x{w} is too small")));
        }
        if self.objects_per_scene.0 > self.objects_per_scene.1 {
            return Err(Error::Config("objects_per_scene range is reversed".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        CLASS_CATALOGUE[..self.num_classes].iter().map(|s| s.to_string()).collect()
    }

    pub fn confusable_pairs(&self) -> Vec<(String, String)> {
        CONFUSABLE
            .iter()
            .filter(|(a, b)| (*a as usize) < self.num_classes && (*b as usize) < self.num_classes)
            .map(|&(a, b)| (CLASS_CATALOGUE[a as usize].to_string(), CLASS_CATALOGUE[b as usize].to_string()))
            .collect()
    }

    fn object_classes(&self) -> Vec<u8> {
        (2..self.num_classes as u8).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Blob { cx: f64, cy: f64, rx: f64, ry: f64, phase: [f64; 3], amp: [f64; 3] },
    Tree { cx: f64, base: f64, trunk_w: f64, trunk_h: f64, canopy_w: f64, canopy_h: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            Shape::Blob { cx, cy, rx, ry, phase, amp } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                let theta = dy.atan2(dx);
                let mut scale = 1.0;
                for k in 0..3 {
                    scale += amp[k] * ((k as f64 + 2.0) * theta + phase[k]).sin();
                }
                (dx * dx + dy * dy).sqrt() <= scale
            }
            Shape::Tree { cx, base, trunk_w, trunk_h, canopy_w, canopy_h } => {
                let trunk_top = base - trunk_h;
                if y <= base && y >= trunk_top && (x - cx).abs() <= trunk_w / 2.0 {
                    return true;
                }
                let apex = trunk_top - canopy_h;
                if y < apex || y > trunk_top {
                    return false;
                }
                let half = canopy_w / 2.0 * (y - apex) / canopy_h;
                (x - cx).abs() <= half
            }
        }
    }
}

/// Placement record of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub class_id: u8,
    pub shape: Shape,
    /// Pixels carrying this object's label in the final map (after occlusion
    /// and outline removal).
    pub labelled_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub labels: LabelMap,
    pub objects: Vec<PlacedObject>,
    /// Labelled pixel count of each background stratum.
    pub background: BTreeMap<u8, usize>,
    pub horizon: f64,
}

#[derive(Debug, Clone)]
struct Paint {
    class_id: u8,
    shape: Shape,
    base: [f64; 3],
    noise: f64,
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generate the scene for `(cfg.seed, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Scene {
    let mut rng = scene_rng(cfg.seed, index);
    let (h, w) = cfg.image_size;
    let (hf, wf) = (h as f64, w as f64);
    let horizon = rng.random_range(0.3 * hf..0.7 * hf);
    let slope = rng.random_range(-0.15..0.15);
    let horizon_at = |x: f64| horizon + slope * (x - wf / 2.0);

    let sky_base = [
        100.0 + rng.random_range(-20.0..20.0),
        150.0 + rng.random_range(-20.0..20.0),
        215.0 + rng.random_range(-15.0..15.0),
    ];
    let grass_base = [
        60.0 + rng.random_range(-15.0..15.0),
        135.0 + rng.random_range(-20.0..20.0),
        50.0 + rng.random_range(-15.0..15.0),
    ];

    let classes = cfg.object_classes();
    let n_objects = rng.random_range(cfg.objects_per_scene.0..=cfg.objects_per_scene.1);
    let mut placed: Vec<Paint> = Vec::new();
    for _ in 0..n_objects {
        let class_id = classes[rng.random_range(0..classes.len())];
        for _attempt in 0..20 {
            let candidate = sample_object(&mut rng, class_id, horizon, slope, cfg, sky_base);
            placed.push(candidate);
            let (_, counts) = ownership(&placed, h, w);
            if counts.iter().all(|&c| c >= cfg.min_region_pixels.max(1)) {
                break;
            }
            placed.pop();
        }
    }

    let (owner, counts) = ownership(&placed, h, w);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut image = RgbImage::new(w as u32, h as u32);
    let mut labels = Array2::<u8>::zeros((h, w));
    let mut background = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let is_sky = yf < horizon_at(xf);
            let mut rgb = if is_sky {
                let lift = 25.0 * (yf / horizon_at(xf)).clamp(0.0, 1.0);
                let n = 4.0 * normal.sample(&mut rng);
                [sky_base[0] + lift + n, sky_base[1] + lift + n, sky_base[2] + lift * 0.5 + n]
            } else {
                let n = 12.0 * normal.sample(&mut rng);
                [grass_base[0] + 0.5 * n, grass_base[1] + n, grass_base[2] + 0.4 * n]
            };
            let o = owner[[y, x]];
            if o == 0 {
                let class = if is_sky { SKY } else { GRASS };
                labels[[y, x]] = class;
                *background.entry(class).or_insert(0) += 1;
            } else {
                let p = &placed[o as usize - 1];
                rgb = paint_pixel(p, xf, yf, &mut rng, &normal);
                let outline = neighbours(y, x, h, w).any(|(ny, nx)| owner[[ny, nx]] != o);
                labels[[y, x]] = if outline { IGNORE_LABEL } else { p.class_id };
            }
            image.put_pixel(x as u32, y as u32, Rgb(rgb.map(clamp_u8)));
        }
    }
    let objects = placed
        .iter()
        .zip(counts)
        .map(|(p, c)| PlacedObject {
            class_id: p.class_id,
            shape: p.shape,
            labelled_pixels: c,
        })
        .collect();
    Scene {
        image,
        labels,
        objects,
        background,
        horizon,
    }
}

fn neighbours(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [
        (y.wrapping_sub(1), x),
        (y + 1, x),
        (y, x.wrapping_sub(1)),
        (y, x + 1),
    ];
    cand.into_iter().filter(move |&(ny, nx)| ny < h && nx < w)
}

/// Owner map (0 = background, k = k-th object) and each object's count of
/// non-outline pixels.
fn ownership(placed: &[Paint], h: usize, w: usize) -> (Array2<u16>, Vec<usize>) {
    let mut owner = Array2::<u16>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            for (k, p) in placed.iter().enumerate().rev() {
                if p.shape.contains(xf, yf) {
                    owner[[y, x]] = k as u16 + 1;
                    break;
                }
            }
        }
    }
    let mut counts = vec![0; placed.len()];
    for y in 0..h {
        for x in 0..w {
            let o = owner[[y, x]];
            if o != 0 && neighbours(y, x, h, w).all(|(ny, nx)| owner[[ny, nx]] == o) {
                counts[o as usize - 1] += 1;
            }
        }
    }
    (owner, counts)
}

fn sample_object(
    rng: &mut ChaCha8Rng,
    class_id: u8,
    horizon: f64,
    slope: f64,
    cfg: &SceneConfig,
    sky: [f64; 3],
) -> Paint {
    let (h, w) = cfg.image_size;
    let (hf, wf) = (h as f64, w as f64);
    let s = hf / 64.0;
    let cx = rng.random_range(4.0 * s..wf - 4.0 * s);
    let ground = horizon + slope * (cx - wf / 2.0);
    let ground_y = |rng: &mut ChaCha8Rng| rng.random_range((ground + 2.0 * s).min(hf - 6.0 * s)..hf - 3.0 * s);
    let blob = |rng: &mut ChaCha8Rng, cy: f64| Shape::Blob {
        cx,
        cy,
        rx: rng.random_range(5.0 * s..10.0 * s),
        ry: rng.random_range(4.0 * s..8.0 * s),
        phase: [0, 1, 2].map(|_| rng.random_range(0.0..std::f64::consts::TAU)),
        amp: [0, 1, 2].map(|_| rng.random_range(0.0..0.08)),
    };
    let (shape, base, noise) = match class_id {
        SAND | MUD | STONE => {
            let cy = ground_y(rng);
            (blob(rng, cy), earth_look(rng, class_id), 7.0)
        }
        BALL => {
            let r = rng.random_range(4.0 * s..8.0 * s);
            let cy = rng.random_range(r.max(0.4 * hf)..hf - r);
            let base = [
                rng.random_range(195.0..240.0),
                rng.random_range(40.0..120.0),
                rng.random_range(30.0..60.0),
            ];
            (Shape::Circle { cx, cy, r }, base, 5.0)
        }
        BOX => {
            let bw = rng.random_range(8.0 * s..16.0 * s);
            let bh = rng.random_range(8.0 * s..14.0 * s);
            let y1 = ground_y(rng).max(bh + 1.0);
            let base = [
                rng.random_range(140.0..170.0),
                rng.random_range(85.0..105.0),
                rng.random_range(35.0..55.0),
            ];
            (
                Shape::Rect { x0: cx - bw / 2.0, y0: y1 - bh, x1: cx + bw / 2.0, y1 },
                base,
                4.0,
            )
        }
        TREE => {
            let base_y = ground_y(rng);
            let shape = Shape::Tree {
                cx,
                base: base_y,
                trunk_w: rng.random_range(2.0 * s..4.0 * s),
                trunk_h: rng.random_range(4.0 * s..8.0 * s),
                canopy_w: rng.random_range(10.0 * s..16.0 * s),
                canopy_h: rng.random_range(10.0 * s..16.0 * s),
            };
            let base = [
                rng.random_range(20.0..40.0),
                rng.random_range(85.0..105.0),
                rng.random_range(30.0..50.0),
            ];
            (shape, base, 6.0)
        }
        WALL => {
            let ww = rng.random_range(16.0 * s..30.0 * s);
            let wh = rng.random_range(6.0 * s..12.0 * s);
            let y1 = ground_y(rng).max(wh + 1.0);
            let g = rng.random_range(140.0..170.0);
            (
                Shape::Rect { x0: cx - ww / 2.0, y0: y1 - wh, x1: cx + ww / 2.0, y1 },
                [g, g, g + 5.0],
                3.0,
            )
        }
        CLOUD => {
            let rx = rng.random_range(6.0 * s..12.0 * s);
            let ry = rng.random_range(3.0 * s..6.0 * s);
            let top = ry + 1.0;
            let bottom = (horizon - ry - 2.0 * s).max(top + 1.0);
            let cy = rng.random_range(top..bottom);
            let lift = rng.random_range(10.0..28.0);
            let base = [sky[0] + lift * 1.3, sky[1] + lift * 1.1, sky[2] + lift * 0.5];
            (Shape::Ellipse { cx, cy, rx, ry }, base, 4.0)
        }
        _ => unreachable!("background classes are not placed as objects"),
    };
    Paint {
        class_id,
        shape,
        base,
        noise,
    }
}

/// Earth objects borrow one of three looks. Each class favours its own look
/// but takes either of the others a fifth of the time each, so a wrong
/// prediction does not say which earth class is actually there.
fn earth_look(rng: &mut ChaCha8Rng, class_id: u8) -> [f64; 3] {
    const LOOKS: [(u8, f64, f64, [f64; 3]); 3] = [
        (SAND, 128.0, 178.0, [1.0, 0.86, 0.62]),
        (MUD, 108.0, 158.0, [1.0, 0.84, 0.60]),
        (STONE, 118.0, 168.0, [1.0, 0.88, 0.68]),
    ];
    let own = LOOKS.iter().position(|l| l.0 == class_id).expect("earth class");
    let pick = rng.random_range(0.0..1.0);
    let look = if pick < 0.6 {
        own
    } else if pick < 0.8 {
        (own + 1) % 3
    } else {
        (own + 2) % 3
    };
    let (_, lo, hi, tint) = LOOKS[look];
    let b = rng.random_range(lo..hi);
    [b * tint[0], b * tint[1], b * tint[2]]
}

fn paint_pixel(p: &Paint, x: f64, y: f64, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> [f64; 3] {
    let n = p.noise * normal.sample(rng);
    let mut rgb = [p.base[0] + n, p.base[1] + n, p.base[2] + n];
    match (p.class_id, p.shape) {
        (BALL, Shape::Circle { cx, cy, r }) => {
            // highlight towards the upper left
            let d = (((x - cx + 0.4 * r).powi(2) + (y - cy + 0.4 * r).powi(2)).sqrt() / r).min(1.5);
            let lift = 40.0 * (1.0 - d).max(0.0);
            rgb.iter_mut().for_each(|v| *v += lift);
        }
        (WALL, Shape::Rect { x0, y0, .. }) => {
            let row = ((y - y0) / 3.0).floor();
            let brick_x = (x - x0 + if row as i64 % 2 == 0 { 0.0 } else { 3.0 }) % 6.0;
            if (y - y0) % 3.0 < 1.0 || brick_x < 1.0 {
                rgb.iter_mut().for_each(|v| *v += 45.0);
            }
        }
        (BOX, Shape::Rect { x0, y0, x1, y1 }) => {
            let edge = (x - x0).min(x1 - x).min(y - y0).min(y1 - y);
            if edge < 1.5 {
                rgb.iter_mut().for_each(|v| *v -= 40.0);
            }
        }
        (TREE, Shape::Tree { base, trunk_h, .. }) if y >= base - trunk_h => {
            rgb = [90.0 + n, 60.0 + n, 30.0 + n];
        }
        _ => {}
    }
    rgb
}

/// One image with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: RgbImage,
    pub labels: LabelMap,
}

/// Network-ready training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Array3<f32>,
    pub labels: LabelMap,
}

impl LabeledImage {
    pub fn to_sample(&self) -> Sample {
        Sample {
            image: image_to_tensor(&self.image),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

/// Disjoint partition of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHalves {
    /// Indices used for backbone pre-training.
    pub backbone: Vec<usize>,
    /// Indices reserved for guide training, never seen by the backbone.
    pub guide: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub confusable_pairs: Vec<(String, String)>,
    pub splits: SplitCounts,
    pub halves: TrainHalves,
    pub seed: u64,
    pub scene: SceneConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl Dataset {
    pub fn generate(cfg: &SceneConfig, n_train: usize, n_test: usize) -> Result<Self> {
        cfg.validate()?;
        let to_img = |s: Scene| LabeledImage {
            image: s.image,
            labels: s.labels,
        };
        let train = (0..n_train as u64).map(|i| to_img(generate_scene(cfg, i))).collect();
        let test = (0..n_test as u64)
            .map(|i| to_img(generate_scene(cfg, TEST_INDEX_OFFSET + i)))
            .collect();
        let half = n_train / 2;
        let manifest = Manifest {
            class_names: cfg.class_names(),
            confusable_pairs: cfg.confusable_pairs(),
            splits: SplitCounts {
                train: n_train,
                test: n_test,
            },
            halves: TrainHalves {
                backbone: (0..half).collect(),
                guide: (half..n_train).collect(),
            },
            seed: cfg.seed,
            scene: cfg.clone(),
        };
        Ok(Self { manifest, train, test })
    }

    pub fn backbone_half(&self) -> impl Iterator<Item = &LabeledImage> {
        self.manifest.halves.backbone.iter().map(|&i| &self.train[i])
    }

    pub fn guide_half(&self) -> impl Iterator<Item = &LabeledImage> {
        self.manifest.halves.guide.iter().map(|&i| &self.train[i])
    }

    /// SHA-256 over the manifest and every image and label, in order.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest).expect("serialisable manifest"));
        for item in self.train.iter().chain(&self.test) {
            h.update(item.image.as_raw());
            h.update(item.labels.as_slice().expect("standard layout"));
        }
        crate::checkpoint::hex(&h.finalize())
    }

    /// Layout: `images/{split}/{index}.png`, `labels/{split}/{index}.png`, `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (split, items) in [("train", &self.train), ("test", &self.test)] {
            let img_dir = dir.join("images").join(split);
            let lbl_dir = dir.join("labels").join(split);
            for d in [&img_dir, &lbl_dir] {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            for (i, item) in items.iter().enumerate() {
                item.image.save(img_dir.join(format!("{i}.png")))?;
                label_to_image(&item.labels).save(lbl_dir.join(format!("{i}.png")))?;
            }
        }
        crate::checkpoint::write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = crate::checkpoint::read_json(&manifest_path)
            .map_err(|e| Error::Dataset(format!("corrupt or missing manifest: {e}")))?;
        let overlap = manifest
            .halves
            .backbone
            .iter()
            .any(|i| manifest.halves.guide.contains(i));
        if overlap {
            return Err(Error::Dataset("manifest halves overlap".into()));
        }
        let load = |split: &str, n: usize| -> Result<Vec<LabeledImage>> {
            (0..n)
                .map(|i| {
                    let ip = dir.join("images").join(split).join(format!("{i}.png"));
                    let lp = dir.join("labels").join(split).join(format!("{i}.png"));
                    let image = open_png(&ip)?.to_rgb8();
                    let labels = image_to_label(&open_png(&lp)?.to_luma8());
                    Ok(LabeledImage { image, labels })
                })
                .collect()
        };
        let train = load("train", manifest.splits.train)?;
        let test = load("test", manifest.splits.test)?;
        Ok(Self { manifest, train, test })
    }
}

fn open_png(path: &PathBuf) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::Dataset(format!("missing file {}", path.display())));
    }
    Ok(image::open(path)?)
}

pub fn label_to_image(labels: &LabelMap) -> GrayImage {
    let (h, w) = labels.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([labels[[y as usize, x as usize]]]))
}

pub fn image_to_label(img: &GrayImage) -> LabelMap {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0])
}
