//! Automatic hint synthesis: compare a prediction with ground truth on an
//! N x N grid, list the fixable errors, sample one in proportion to the
//! pixels it would fix, and phrase it as text.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::LabelMap;
use crate::dataset::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::language::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    /// A class is missing from the prediction.
    Find,
    /// A class is predicted where it does not belong.
    Remove,
}

impl Operation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Operation::Find => "find",
            Operation::Remove => "remove",
        }
    }
}

/// Which operations a training run may sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintRegime {
    Find,
    Remove,
    FindOrRemove,
}

impl HintRegime {
    pub fn as_str(&self) -> &'static str {
        match self {
            HintRegime::Find => "find",
            HintRegime::Remove => "remove",
            HintRegime::FindOrRemove => "find_or_remove",
        }
    }

    pub fn allows(&self, op: Operation) -> bool {
        matches!(
            (self, op),
            (HintRegime::FindOrRemove, _) | (HintRegime::Find, Operation::Find) | (HintRegime::Remove, Operation::Remove)
        )
    }
}

impl std::str::FromStr for HintRegime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "find" => Ok(HintRegime::Find),
            "remove" => Ok(HintRegime::Remove),
            "find_or_remove" => Ok(HintRegime::FindOrRemove),
            other => Err(Error::Config(format!("unknown hint regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGenConfig {
    pub grid_n: usize,
    pub min_region_pixels: usize,
    pub templates: BTreeMap<Operation, Vec<String>>,
    pub seed: u64,
}

impl Default for QueryGenConfig {
    fn default() -> Self {
        let t = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            grid_n: 3,
            min_region_pixels: 20,
            templates: BTreeMap::from([
                (
                    Operation::Find,
                    t(&["find the {c} {loc}", "the {c} is missing {loc}", "there is a {c} {loc|in the image}"]),
                ),
                (
                    Operation::Remove,
                    t(&["remove the {c} {loc}", "there is no {c} {loc}", "the {c} is wrong {loc}"]),
                ),
            ]),
            seed: 0,
        }
    }
}

impl QueryGenConfig {
    /// Defaults with the region threshold `max(20, 0.1% of the image)`.
    pub fn for_image(h: usize, w: usize) -> Self {
        Self {
            min_region_pixels: 20.max(h * w / 1000),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_n == 0 {
            return Err(Error::Config("grid_n must be at least 1".into()));
        }
        for op in [Operation::Find, Operation::Remove] {
            if self.templates.get(&op).is_none_or(|t| t.is_empty()) {
                return Err(Error::Config(format!("no templates for `{}`", op.as_str())));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = crate::checkpoint::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    /// Erroneous pixels of the query's kind inside this cell.
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub operation: Operation,
    pub class_id: u8,
    pub class_name: String,
    /// Cells in row-major order.
    pub cells: Vec<GridCell>,
    /// Pixels that become correct if the error is fixed.
    pub improvement: usize,
}

impl QuerySpec {
    pub fn cell_set(&self) -> Vec<(usize, usize)> {
        self.cells.iter().map(|c| (c.row, c.col)).collect()
    }

    /// Whether pixel `(y, x)` is one of the errors this query describes.
    pub fn designates(&self, pred: u8, gt: u8) -> bool {
        match self.operation {
            Operation::Find => gt == self.class_id && pred != self.class_id,
            Operation::Remove => pred == self.class_id && gt != self.class_id && gt != IGNORE_LABEL,
        }
    }
}

fn cell_of(y: usize, x: usize, h: usize, w: usize, n: usize) -> (usize, usize) {
    (y * n / h, x * n / w)
}

/// Every (operation, class) error with at least `min_region_pixels` pixels
/// in some grid cell, merged over cells. Finds come first, each kind in
/// class order.
pub fn enumerate_errors(
    pred: &LabelMap,
    gt: &LabelMap,
    class_names: &[String],
    cfg: &QueryGenConfig,
) -> Result<Vec<QuerySpec>> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!("{:?}", gt.dim()), format!("{:?}", pred.dim())));
    }
    let n = cfg.grid_n;
    let (h, w) = pred.dim();
    let nc = class_names.len();
    // counts[op][class][cell]
    let mut counts = vec![vec![vec![0usize; n * n]; nc]; 2];
    for ((y, x), &p) in pred.indexed_iter() {
        let g = gt[[y, x]];
        if g == p || g == IGNORE_LABEL {
            continue;
        }
        let (r, c) = cell_of(y, x, h, w, n);
        if (g as usize) < nc {
            counts[0][g as usize][r * n + c] += 1;
        }
        if (p as usize) < nc {
            counts[1][p as usize][r * n + c] += 1;
        }
    }
    let mut out = Vec::new();
    for (oi, op) in [Operation::Find, Operation::Remove].into_iter().enumerate() {
        for (class, per_cell) in counts[oi].iter().enumerate() {
            let cells: Vec<GridCell> = per_cell
                .iter()
                .enumerate()
                .filter(|&(_, &k)| k > 0 && k >= cfg.min_region_pixels)
                .map(|(i, &k)| GridCell {
                    row: i / n,
                    col: i % n,
                    pixels: k,
                })
                .collect();
            if cells.is_empty() {
                continue;
            }
            out.push(QuerySpec {
                operation: op,
                class_id: class as u8,
                class_name: class_names[class].clone(),
                improvement: cells.iter().map(|c| c.pixels).sum(),
                cells,
            });
        }
    }
    Ok(out)
}

/// Draw one candidate with probability proportional to its improvement.
pub fn sample_query<R: Rng + ?Sized>(candidates: &[QuerySpec], rng: &mut R) -> Result<QuerySpec> {
    let weights: Vec<usize> = candidates.iter().map(|c| c.improvement).collect();
    let dist = WeightedIndex::new(&weights).map_err(|_| Error::Empty("no query candidates".into()))?;
    Ok(candidates[dist.sample(rng)].clone())
}

/// Sample a query allowed by `regime`. For the mixed regime the operation is
/// chosen uniformly among the operations that have candidates first.
pub fn sample_for_regime<R: Rng + ?Sized>(
    candidates: &[QuerySpec],
    regime: HintRegime,
    rng: &mut R,
) -> Option<QuerySpec> {
    let of = |op: Operation| -> Vec<QuerySpec> {
        candidates.iter().filter(|c| c.operation == op).cloned().collect()
    };
    let pool = match regime {
        HintRegime::Find => of(Operation::Find),
        HintRegime::Remove => of(Operation::Remove),
        HintRegime::FindOrRemove => {
            let mut ops: Vec<Vec<QuerySpec>> = [of(Operation::Find), of(Operation::Remove)]
                .into_iter()
                .filter(|v| !v.is_empty())
                .collect();
            if ops.is_empty() {
                return None;
            }
            let k = rng.random_range(0..ops.len());
            ops.swap_remove(k)
        }
    };
    sample_query(&pool, rng).ok()
}

const VERTICAL: [&str; 3] = ["top", "middle", "bottom"];
const HORIZONTAL: [&str; 3] = ["left", "center", "right"];

fn band(i: usize, n: usize) -> usize {
    (i * 3 / n).min(2)
}

fn single_cell_phrase(row: usize, col: usize, n: usize) -> String {
    match (band(row, n), band(col, n)) {
        (1, 1) => "in the middle".to_string(),
        (v, h) => format!("on the {} {}", VERTICAL[v], HORIZONTAL[h]),
    }
}

/// Spatial phrase for a set of cells; `None` when every cell is involved.
pub fn location_phrase(cells: &[GridCell], n: usize) -> Option<String> {
    let set: std::collections::BTreeSet<(usize, usize)> = cells.iter().map(|c| (c.row, c.col)).collect();
    if set.len() == n * n {
        return None;
    }
    if set.len() == 1 {
        let &(r, c) = set.iter().next().expect("one cell");
        return Some(single_cell_phrase(r, c, n));
    }
    if n > 1 && set.len() == n {
        let rows: std::collections::BTreeSet<usize> = set.iter().map(|c| c.0).collect();
        let cols: std::collections::BTreeSet<usize> = set.iter().map(|c| c.1).collect();
        if rows.len() == 1 {
            let r = *rows.iter().next().expect("one row");
            return Some(["on the top", "in the vertical middle", "on the bottom"][band(r, n)].to_string());
        }
        if cols.len() == 1 {
            let c = *cols.iter().next().expect("one column");
            return Some(["on the left", "in the horizontal middle", "on the right"][band(c, n)].to_string());
        }
    }
    let best = cells
        .iter()
        .fold(None::<&GridCell>, |b, c| match b {
            Some(b) if b.pixels >= c.pixels => Some(b),
            _ => Some(c),
        })?;
    Some(single_cell_phrase(best.row, best.col, n))
}

/// Every phrase [`location_phrase`] can produce for an `n x n` grid.
pub fn all_location_phrases(n: usize) -> Vec<Option<String>> {
    let mut out = vec![None];
    for r in 0..n {
        for c in 0..n {
            out.push(Some(single_cell_phrase(r, c, n)));
        }
    }
    if n > 1 {
        for p in [
            "on the top",
            "in the vertical middle",
            "on the bottom",
            "on the left",
            "in the horizontal middle",
            "on the right",
        ] {
            out.push(Some(p.to_string()));
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Fill a template. `{c}` is the class name; `{loc}` is the phrase, or the
/// text after `|` in `{loc|fallback}` when the phrase is omitted.
pub fn fill_template(template: &str, class_name: &str, phrase: Option<&str>) -> String {
    let mut out = String::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let Some(len) = rest[start..].find('}') else {
            out.push_str(&rest[start..]);
            rest = "";
            break;
        };
        let key = &rest[start + 1..start + len];
        let (name, fallback) = key.split_once('|').unwrap_or((key, ""));
        match name {
            "c" => out.push_str(class_name),
            "loc" => out.push_str(phrase.unwrap_or(fallback)),
            _ => out.push_str(&rest[start..=start + len]),
        }
        rest = &rest[start + len + 1..];
    }
    out.push_str(rest);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Render a query with a uniformly chosen template.
pub fn render_text<R: Rng + ?Sized>(spec: &QuerySpec, cfg: &QueryGenConfig, rng: &mut R) -> Result<String> {
    let templates = cfg
        .templates
        .get(&spec.operation)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::Config(format!("no templates for `{}`", spec.operation.as_str())))?;
    let template = &templates[rng.random_range(0..templates.len())];
    let phrase = location_phrase(&spec.cells, cfg.grid_n);
    Ok(fill_template(template, &spec.class_name, phrase.as_deref()))
}

/// Recover `(operation, class)` from text produced by [`render_text`].
pub fn parse_text(text: &str, class_names: &[String], cfg: &QueryGenConfig) -> Option<(Operation, u8)> {
    let target = tokenize(text);
    if target.is_empty() {
        return None;
    }
    let phrases = all_location_phrases(cfg.grid_n);
    for (op, templates) in &cfg.templates {
        for t in templates {
            for (class, name) in class_names.iter().enumerate() {
                for p in &phrases {
                    if tokenize(&fill_template(t, name, p.as_deref())) == target {
                        return Some((*op, class as u8));
                    }
                }
            }
        }
    }
    None
}

/// Per-pixel loss weights for one query: initially correct pixels 0.5,
/// errors named by the query 1, other errors and ignore pixels 0. Without a
/// query every labelled pixel gets 0.5.
pub fn build_weight_map(pred: &LabelMap, gt: &LabelMap, spec: Option<&QuerySpec>) -> Result<Array2<f32>> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!("{:?}", gt.dim()), format!("{:?}", pred.dim())));
    }
    Ok(ndarray::Zip::from(pred).and(gt).map_collect(|&p, &g| {
        if g == IGNORE_LABEL {
            return 0.0;
        }
        let Some(spec) = spec else { return 0.5 };
        if p == g {
            0.5
        } else if (spec.operation == Operation::Find && g == spec.class_id)
            || (spec.operation == Operation::Remove && p == spec.class_id)
        {
            1.0
        } else {
            0.0
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn spec(op: Operation, class: u8, name: &str, cells: &[(usize, usize)]) -> QuerySpec {
        QuerySpec {
            operation: op,
            class_id: class,
            class_name: name.into(),
            cells: cells.iter().map(|&(row, col)| GridCell { row, col, pixels: 1 }).collect(),
            improvement: cells.len(),
        }
    }

    #[test]
    fn equal_maps_have_no_errors() {
        let m = Array2::from_shape_fn((6, 6), |(y, x)| ((y + x) % 3) as u8);
        assert!(enumerate_errors(&m, &m, &names(3), &QueryGenConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn corner_cell_fixture() {
        let mut gt = Array2::from_elem((6, 6), 0u8);
        let mut pred = gt.clone();
        for y in 0..2 {
            for x in 0..2 {
                gt[[y, x]] = 2;
                pred[[y, x]] = 1;
            }
        }
        let cfg = QueryGenConfig {
            min_region_pixels: 1,
            ..QueryGenConfig::default()
        };
        let out = enumerate_errors(&pred, &gt, &names(3), &cfg).unwrap();
        let cell = vec![GridCell { row: 0, col: 0, pixels: 4 }];
        assert!(out.iter().any(|q| q.operation == Operation::Find && q.class_id == 2 && q.cells == cell && q.improvement == 4));
        assert!(out.iter().any(|q| q.operation == Operation::Remove && q.class_id == 1 && q.cells == cell && q.improvement == 4));
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn tiny_regions_are_dropped() {
        let gt = Array2::from_elem((9, 9), 0u8);
        let mut pred = gt.clone();
        for x in 0..3 {
            pred[[0, x]] = 1;
        }
        let cfg = QueryGenConfig {
            min_region_pixels: 5,
            ..QueryGenConfig::default()
        };
        assert!(enumerate_errors(&pred, &gt, &names(2), &cfg).unwrap().is_empty());
    }

    #[test]
    fn phrases() {
        let cfg = QueryGenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let only_first = QueryGenConfig {
            templates: BTreeMap::from([
                (Operation::Find, vec!["find the {c} {loc}".to_string()]),
                (Operation::Remove, vec!["remove the {c} {loc}".to_string()]),
            ]),
            ..cfg.clone()
        };
        let q = spec(Operation::Find, 0, "person", &[(0, 2)]);
        assert_eq!(render_text(&q, &only_first, &mut rng).unwrap(), "find the person on the top right");
        let q = spec(Operation::Remove, 0, "horse", &[(1, 1)]);
        assert_eq!(render_text(&q, &only_first, &mut rng).unwrap(), "remove the horse in the middle");
        let all: Vec<_> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
        let q = spec(Operation::Find, 0, "sky", &all);
        assert_eq!(fill_template("there is a {c} {loc|in the image}", "sky", location_phrase(&q.cells, 3).as_deref()), "there is a sky in the image");
        assert_eq!(fill_template("find the {c} {loc}", "sky", None), "find the sky");
        let row = spec(Operation::Find, 0, "x", &[(2, 0), (2, 1), (2, 2)]);
        assert_eq!(location_phrase(&row.cells, 3).as_deref(), Some("on the bottom"));
        let col = spec(Operation::Find, 0, "x", &[(0, 0), (1, 0), (2, 0)]);
        assert_eq!(location_phrase(&col.cells, 3).as_deref(), Some("on the left"));
        let mut mixed = spec(Operation::Find, 0, "x", &[(0, 0), (2, 1)]);
        mixed.cells[1].pixels = 9;
        assert_eq!(location_phrase(&mixed.cells, 3).as_deref(), Some("on the bottom center"));
    }

    #[test]
    fn weight_map_fixture() {
        let gt = Array2::from_shape_vec((2, 2), vec![1u8, 1, 0, 2]).unwrap();
        let pred = Array2::from_shape_vec((2, 2), vec![0u8, 1, 0, 0]).unwrap();
        let q = spec(Operation::Find, 1, "c1", &[(0, 0)]);
        let w = build_weight_map(&pred, &gt, Some(&q)).unwrap();
        assert_eq!(w, Array2::from_shape_vec((2, 2), vec![1.0, 0.5, 0.5, 0.0]).unwrap());
        let w = build_weight_map(&gt, &gt, Some(&q)).unwrap();
        assert!(w.iter().all(|&v| v == 0.5));
        let r = spec(Operation::Remove, 7, "c7", &[(0, 0)]);
        assert!(build_weight_map(&pred, &gt, Some(&r)).unwrap().iter().all(|&v| v != 1.0));
        let mut gi = gt.clone();
        gi[[0, 1]] = IGNORE_LABEL;
        assert_eq!(build_weight_map(&pred, &gi, None).unwrap()[[0, 1]], 0.0);
    }

    #[test]
    fn regime_sampling_respects_operations() {
        let f = spec(Operation::Find, 1, "a", &[(0, 0)]);
        let r = spec(Operation::Remove, 2, "b", &[(0, 0)]);
        let cands = vec![f.clone(), r.clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert_eq!(sample_for_regime(&cands, HintRegime::Find, &mut rng).unwrap().operation, Operation::Find);
            assert_eq!(sample_for_regime(&cands, HintRegime::Remove, &mut rng).unwrap().operation, Operation::Remove);
        }
        assert!(sample_for_regime(&[f], HintRegime::Remove, &mut rng).is_none());
        assert!(sample_query(&[], &mut rng).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = QueryGenConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<QueryGenConfig>(&text).unwrap(), cfg);
        assert_eq!(QueryGenConfig::for_image(64, 64).min_region_pixels, 20);
        assert_eq!(QueryGenConfig::for_image(1000, 1000).min_region_pixels, 1000);
    }
}
