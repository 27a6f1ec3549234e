//! Classification and segmentation evaluation: accuracy, macro-averaged F1,
//! Dice overlap, and the confusion matrix they are computed from.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Domain(format!(
                "class ({truth},{pred}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn set_count(&mut self, truth: usize, pred: usize, v: u64) {
        self.counts[truth * self.classes + pred] = v;
    }
}

/// Fraction of correctly classified samples: trace / total.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Domain("accuracy of an empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.classes()).map(|i| cm.count(i, i)).sum();
    Ok(trace as f64 / total as f64)
}

/// Unweighted mean of per-class F1. A class with no true positives and no
/// predicted positives contributes 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Domain("macro F1 of an empty confusion matrix".into()));
    }
    let c = cm.classes();
    let mut sum = 0.0;
    for class in 0..c {
        let tp = cm.count(class, class) as f64;
        let fp: f64 = (0..c).filter(|&t| t != class).map(|t| cm.count(t, class) as f64).sum();
        let fne: f64 = (0..c).filter(|&p| p != class).map(|p| cm.count(class, p) as f64).sum();
        let denom = 2.0 * tp + fp + fne;
        if denom > 0.0 {
            sum += 2.0 * tp / denom;
        }
    }
    Ok(sum / c as f64)
}

/// Overlap ratio `2|A∩B| / (|A|+|B|)` between binary masks. Two empty masks
/// score 1.
pub fn dice_score(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if !pred.same_shape(truth) {
        return Err(Error::Shape(format!(
            "mask shapes {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    for t in [pred, truth] {
        if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("dice masks must be binary".into()));
        }
    }
    let inter: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| a * b).sum();
    let sizes = pred.sum() + truth.sum();
    if sizes == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / sizes)
}
