//! Evaluation against dense ground truth: confusion matrix, per-class F1,
//! mean F1, mean IoU, and overall accuracy. Ground-truth pixels labeled 0 are
//! ignored.

use crate::error::{Error, Result};
use crate::grid::LabelMatrix;

/// k x k counts; rows index the ground-truth class, columns the prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Shape(format!("expected {} counts, got {}", k * k, counts.len())));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(Error::Shape("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Accumulates a confusion matrix over the pixels with nonzero ground truth.
pub fn confusion(pred: &LabelMatrix, gt: &LabelMatrix, k: usize) -> Result<ConfusionMatrix> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Shape(format!(
            "prediction {}x{} does not match ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    gt.validate_classes(k)?;
    let mut cm = ConfusionMatrix::zeros(k);
    for (p, g) in pred.labels.iter().zip(&gt.labels) {
        if *g == 0 {
            continue;
        }
        let p = *p as usize;
        if p == 0 || p > k {
            return Err(Error::Domain(format!("prediction label {p} outside [1,{k}]")));
        }
        cm.counts[(*g as usize - 1) * k + (p - 1)] += 1;
    }
    Ok(cm)
}

/// Summary scores derived from a confusion matrix. `per_class` entries are
/// `None` for classes absent from both prediction and ground truth; those
/// classes are excluded from the means.
#[derive(Debug, Clone)]
pub struct Scores {
    pub f1: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub mf1: f64,
    pub miou: f64,
    pub oa: f64,
}

pub fn scores(cm: &ConfusionMatrix) -> Result<Scores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Domain("confusion matrix is empty".into()));
    }
    let k = cm.k;
    let mut f1 = Vec::with_capacity(k);
    let mut iou = Vec::with_capacity(k);
    let mut trace = 0u64;
    for c in 0..k {
        let tp = cm.get(c, c);
        trace += tp;
        let fp: u64 = (0..k).filter(|&g| g != c).map(|g| cm.get(g, c)).sum();
        let fngt: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
        if tp + fp + fngt == 0 {
            f1.push(None);
            iou.push(None);
        } else {
            f1.push(Some(2.0 * tp as f64 / (2 * tp + fp + fngt) as f64));
            iou.push(Some(tp as f64 / (tp + fp + fngt) as f64));
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| f1[c].is_some()).collect();
    let mf1 = present.iter().map(|&c| f1[c].unwrap()).sum::<f64>() / present.len() as f64;
    let miou = present.iter().map(|&c| iou[c].unwrap()).sum::<f64>() / present.len() as f64;
    let oa = trace as f64 / total as f64;
    Ok(Scores { f1, iou, mf1, miou, oa })
}
