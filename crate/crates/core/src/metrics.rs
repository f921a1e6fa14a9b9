//! Dataset-level confusion matrix and mean IoU.

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::seg::{ClassMask, IGNORE_INDEX};

/// Counts indexed `[truth][pred]`, accumulated over a whole evaluation set.
/// Shards merge by elementwise addition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(ModelError::Input(format!("mIoU needs at least 2 classes, got {num_classes}")));
        }
        Ok(ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Adds one prediction/truth pair. Pixels whose truth is ignored are skipped.
    pub fn add(&mut self, pred: &ClassMask, truth: &ClassMask) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(ModelError::Input(format!(
                "prediction {:?} and truth {:?} differ in shape",
                pred.shape(),
                truth.shape()
            )));
        }
        let n = self.num_classes;
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            if t == IGNORE_INDEX {
                continue;
            }
            if t as usize >= n || p as usize >= n {
                return Err(ModelError::Input(format!("label {} out of range for {n} classes", t.max(p))));
            }
            self.counts[t as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(ModelError::Input("cannot merge confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP/(TP+FP+FN)` per class; `None` for classes absent from both
    /// prediction and truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_: u64 = (0..n).map(|p| self.count(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..n).map(|t| self.count(t, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over present classes, optionally leaving out class 0.
    /// Returns 0 when no class is present.
    pub fn mean_iou(&self, exclude_background: bool) -> f64 {
        let ious = self.per_class_iou();
        let skip = usize::from(exclude_background);
        let present: Vec<f64> = ious.iter().skip(skip).flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Mean IoU of a single prediction/truth pair, with per-class values.
pub fn miou(pred: &ClassMask, truth: &ClassMask, num_classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let mut cm = ConfusionMatrix::new(num_classes)?;
    cm.add(pred, truth)?;
    Ok((cm.mean_iou(false), cm.per_class_iou()))
}
