//! Run-length encoding of label maps for transport.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use segguide_core::backbone::LabelMap;

/// Row-major runs of `[class_id, length]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleLabelMap {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<[u32; 2]>,
}

pub fn encode(map: &LabelMap) -> RleLabelMap {
    let (height, width) = map.dim();
    let mut runs: Vec<[u32; 2]> = Vec::new();
    for &v in map.iter() {
        match runs.last_mut() {
            Some(run) if run[0] == v as u32 => run[1] += 1,
            _ => runs.push([v as u32, 1]),
        }
    }
    RleLabelMap { height, width, runs }
}

pub fn decode(rle: &RleLabelMap) -> Result<LabelMap, String> {
    let total = rle.height * rle.width;
    let mut flat = Vec::with_capacity(total);
    for &[value, len] in &rle.runs {
        if value > u8::MAX as u32 {
            return Err(format!("class id {value} does not fit a label map"));
        }
        if len == 0 {
            return Err("zero-length run".into());
        }
        if flat.len() + len as usize > total {
            return Err(format!("runs cover more than {}x{} pixels", rle.height, rle.width));
        }
        flat.extend(std::iter::repeat_n(value as u8, len as usize));
    }
    if flat.len() != total {
        return Err(format!("runs cover {} of {total} pixels", flat.len()));
    }
    Ok(Array2::from_shape_vec((rle.height, rle.width), flat).expect("length checked"))
}
