//! Brute-force oracles for the query generator, the metrics and the weight map.

use std::collections::BTreeSet;

use ndarray::{array, Array2};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use segguide_core::dataset::IGNORE_LABEL;
use segguide_core::metrics::ConfusionMatrix;
use segguide_core::query::{build_weight_map, enumerate_errors, sample_query, GridCell, Operation, QueryGenConfig, QuerySpec};

use crate::{Check, Outcome};

type Key = (Operation, u8, String, Vec<(usize, usize, usize)>, usize);

fn key(q: &QuerySpec) -> Key {
    (
        q.operation,
        q.class_id,
        q.class_name.clone(),
        q.cells.iter().map(|c| (c.row, c.col, c.pixels)).collect(),
        q.improvement,
    )
}

/// Enumerates errors straight from the definitions: cell by cell, class by
/// class, counting the pixels each operation would fix.
fn brute_force(pred: &Array2<u8>, gt: &Array2<u8>, names: &[String], n: usize, min_pixels: usize) -> BTreeSet<Key> {
    let (h, w) = gt.dim();
    let in_band = |i: usize, band: usize, len: usize| band * len <= i * n && i * n < (band + 1) * len;
    let mut out = BTreeSet::new();
    for op in [Operation::Find, Operation::Remove] {
        for k in 0..names.len() as u8 {
            let mut cells = Vec::new();
            for r in 0..n {
                for c in 0..n {
                    let mut count = 0;
                    for y in (0..h).filter(|&y| in_band(y, r, h)) {
                        for x in (0..w).filter(|&x| in_band(x, c, w)) {
                            let (p, g) = (pred[[y, x]], gt[[y, x]]);
                            if g == IGNORE_LABEL {
                                continue;
                            }
                            let wrong = match op {
                                Operation::Find => g == k && p != k,
                                Operation::Remove => p == k && g != k,
                            };
                            count += wrong as usize;
                        }
                    }
                    if count > 0 && count >= min_pixels {
                        cells.push((r, c, count));
                    }
                }
            }
            if !cells.is_empty() {
                let total = cells.iter().map(|c| c.2).sum();
                out.insert((op, k, names[k as usize].clone(), cells, total));
            }
        }
    }
    out
}

fn random_pair(rng: &mut StdRng, h: usize, w: usize, nc: u8, ignore_rate: f64) -> (Array2<u8>, Array2<u8>) {
    let gt = Array2::from_shape_simple_fn((h, w), || {
        if rng.random_bool(ignore_rate) {
            IGNORE_LABEL
        } else {
            rng.random_range(0..nc)
        }
    });
    // predictions agree with ground truth often enough to leave structure
    let pred = Array2::from_shape_fn((h, w), |(y, x)| {
        let g = gt[[y, x]];
        if g != IGNORE_LABEL && rng.random_bool(0.5) {
            g
        } else {
            rng.random_range(0..nc)
        }
    });
    (pred, gt)
}

fn names(nc: usize) -> Vec<String> {
    (0..nc).map(|i| format!("class{i}")).collect()
}

pub fn a3() -> Check {
    let mut rng = StdRng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut total_candidates = 0;
    for _ in 0..1000 {
        let nc = rng.random_range(2..6u8);
        let (h, w) = (rng.random_range(2..16), rng.random_range(2..16));
        let (pred, gt) = random_pair(&mut rng, h, w, nc, 0.1);
        let cfg = QueryGenConfig {
            grid_n: rng.random_range(1..5),
            min_region_pixels: rng.random_range(0..6),
            ..QueryGenConfig::default()
        };
        let names = names(nc as usize);
        let got = enumerate_errors(&pred, &gt, &names, &cfg).map_err(|e| e.to_string())?;
        let got_keys: BTreeSet<Key> = got.iter().map(key).collect();
        let expected = brute_force(&pred, &gt, &names, cfg.grid_n, cfg.min_region_pixels);
        total_candidates += got.len();
        if got_keys != expected || got_keys.len() != got.len() {
            mismatches += 1;
        }
    }

    let mut worst: f64 = 0.0;
    for trial in 0..5u64 {
        let k = 3 + trial as usize;
        let candidates: Vec<QuerySpec> = (0..k)
            .map(|i| QuerySpec {
                operation: if i % 2 == 0 { Operation::Find } else { Operation::Remove },
                class_id: i as u8,
                class_name: format!("class{i}"),
                cells: vec![GridCell { row: 0, col: 0, pixels: 1 }],
                improvement: rng.random_range(1..60),
            })
            .collect();
        let sum: usize = candidates.iter().map(|c| c.improvement).sum();
        let mut hits = vec![0usize; k];
        let mut draw_rng = StdRng::seed_from_u64(100 + trial);
        for _ in 0..10_000 {
            let q = sample_query(&candidates, &mut draw_rng).map_err(|e| e.to_string())?;
            hits[q.class_id as usize] += 1;
        }
        for (c, &n) in candidates.iter().zip(&hits) {
            let dev = (n as f64 / 10_000.0 - c.improvement as f64 / sum as f64).abs();
            worst = worst.max(dev);
        }
    }
    Ok(Outcome::new(
        mismatches == 0 && worst <= 0.05,
        format!(
            "{mismatches}/1000 pairs differ from brute force ({total_candidates} candidates); \
             max sampling deviation {worst:.4} over 5x10000 draws (tol 0.05)"
        ),
    ))
}

/// IoU and accuracy counted pixel by pixel, without a confusion matrix.
fn brute_metrics(pred: &Array2<u8>, gt: &Array2<u8>, nc: u8) -> (f64, f64) {
    let labelled: Vec<(u8, u8)> = pred
        .iter()
        .zip(gt.iter())
        .filter(|(_, &g)| g != IGNORE_LABEL)
        .map(|(&p, &g)| (p, g))
        .collect();
    let mut ious = Vec::new();
    for c in 0..nc {
        let inter = labelled.iter().filter(|&&(p, g)| p == c && g == c).count();
        let union = labelled.iter().filter(|&&(p, g)| p == c || g == c).count();
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    let correct = labelled.iter().filter(|(p, g)| p == g).count();
    (
        ious.iter().sum::<f64>() / ious.len() as f64,
        correct as f64 / labelled.len() as f64,
    )
}

pub fn a9() -> Check {
    let mut rng = StdRng::seed_from_u64(9);
    let mut checked = 0;
    let mut mismatches = 0;
    while checked < 100 {
        let nc = rng.random_range(2..8u8);
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let (pred, gt) = random_pair(&mut rng, h, w, nc, 0.15);
        if gt.iter().all(|&g| g == IGNORE_LABEL) {
            continue;
        }
        let mut cm = ConfusionMatrix::new(nc as usize);
        cm.accumulate(&pred, &gt).map_err(|e| e.to_string())?;
        let (miou, acc) = brute_metrics(&pred, &gt, nc);
        if cm.miou().map_err(|e| e.to_string())? != miou || cm.pixel_accuracy().map_err(|e| e.to_string())? != acc {
            mismatches += 1;
        }
        checked += 1;
    }
    let fixture = ConfusionMatrix {
        counts: array![[3u64, 1], [1, 3]],
    };
    let (miou, acc) = (
        fixture.miou().map_err(|e| e.to_string())?,
        fixture.pixel_accuracy().map_err(|e| e.to_string())?,
    );
    Ok(Outcome::new(
        mismatches == 0 && miou == 0.6 && acc == 0.75,
        format!("{mismatches}/100 random pairs differ; fixture mIoU {miou} accuracy {acc}"),
    ))
}

pub fn a10() -> Check {
    let gt = array![[1u8, 1], [0, 2]];
    let pred = array![[0u8, 1], [0, 0]];
    let spec = QuerySpec {
        operation: Operation::Find,
        class_id: 1,
        class_name: "class1".into(),
        cells: vec![GridCell { row: 0, col: 0, pixels: 1 }],
        improvement: 1,
    };
    let w = build_weight_map(&pred, &gt, Some(&spec)).map_err(|e| e.to_string())?;
    let expected = array![[1.0f32, 0.5], [0.5, 0.0]];
    Ok(Outcome::new(w == expected, format!("weights {:?}", w.as_slice().unwrap_or_default())))
}
