//! Confusion matrices, mIoU and pixel accuracy.

use ndarray::Array2;

use crate::dataset::IGNORE_LABEL;
use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Tally every non-ignore pixel of `gt` against `pred`.
    pub fn accumulate(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::shape(format!("{:?}", gt.dim()), format!("{:?}", pred.dim())));
        }
        let c = self.num_classes();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::Invalid(format!("class {} out of range for {c} classes", g.max(p))));
            }
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    /// Per-class IoU; `None` for classes absent from both ground truth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|c| {
                let tp = self.counts[[c, c]];
                let row: u64 = self.counts.row(c).sum();
                let col: u64 = self.counts.column(c).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in ground truth or prediction.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::Empty("confusion matrix has no pixels".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("confusion matrix has no pixels".into()));
        }
        Ok(self.counts.diag().sum() as f64 / total as f64)
    }
}

/// mIoU of a single prediction.
pub fn image_miou(pred: &Array2<u8>, gt: &Array2<u8>, num_classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt)?;
    cm.miou()
}
