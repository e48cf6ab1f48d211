//! Pixel-level scoring: confusion matrices, per-class and localization F1,
//! and the combined damage score.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mask::ClassMask;

/// Rows are truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks_exact(self.num_classes)
    }

    /// Count label pairs from two equally long label slices.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(invalid!("prediction has {} pixels, truth {}", pred.len(), truth.len()));
        }
        let n = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= n || t >= n {
                return Err(invalid!("label {} out of range for {n} classes", p.max(t)));
            }
            self.counts[t * n + p] += 1;
        }
        Ok(())
    }

    /// Elementwise sum, for combining per-tile matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(invalid!("cannot merge {}- and {}-class matrices", self.num_classes, other.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.num_classes).map(|i| self.get(i, i)).sum();
        diag as f64 / total as f64
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.num_classes).filter(|&t| t != c).map(|t| self.get(t, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.num_classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }
}

pub fn confusion(pred: &ClassMask, truth: &ClassMask, num_classes: usize) -> Result<ConfusionMatrix> {
    if !pred.same_shape(truth) {
        return Err(invalid!(
            "prediction {}x{} and truth {}x{} differ in shape",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        ));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred.data(), truth.data())?;
    Ok(cm)
}

/// `2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
pub fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn f1_per_class(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.num_classes())
        .map(|c| f1(cm.true_positives(c), cm.false_positives(c), cm.false_negatives(c)))
        .collect()
}

/// Binary building (classes >= 1) vs no-building F1.
pub fn localization_f1(pred: &ClassMask, truth: &ClassMask) -> Result<f64> {
    if !pred.same_shape(truth) {
        return Err(invalid!("prediction and truth differ in shape"));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p > 0, t > 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(f1(tp, fp, fn_))
}

/// Harmonic mean; 0 if any value is 0 or the slice is empty.
pub fn harmonic_mean(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// `0.3 * localization + 0.7 * harmonic_mean(damage F1s)`.
pub fn overall_score(loc_f1: f64, damage_f1s: &[f64; 4]) -> f64 {
    0.3 * loc_f1 + 0.7 * harmonic_mean(damage_f1s)
}

/// Unweighted mean of the damage-class F1s (classes 1 through 4).
pub fn macro_damage_f1(per_class: &[f64]) -> f64 {
    let d = &per_class[1..per_class.len().min(5)];
    d.iter().sum::<f64>() / d.len() as f64
}

/// Intersection over union for one class.
pub fn iou(cm: &ConfusionMatrix, c: usize) -> f64 {
    let tp = cm.true_positives(c);
    let denom = tp + cm.false_positives(c) + cm.false_negatives(c);
    if denom == 0 {
        0.0
    } else {
        tp as f64 / denom as f64
    }
}

/// Damage scoring report keyed like the usual results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(rename = "F1 - Localization")]
    pub localization: f64,
    #[serde(rename = "F1 - No Damage")]
    pub no_damage: f64,
    #[serde(rename = "F1 - Minor Damage")]
    pub minor: f64,
    #[serde(rename = "F1 - Major Damage")]
    pub major: f64,
    #[serde(rename = "F1 - Destroyed")]
    pub destroyed: f64,
    #[serde(rename = "F1 - Score")]
    pub score: f64,
    pub pixel_accuracy: f64,
    pub pixels: u64,
}

/// Score a set of prediction/truth mask pairs as one pooled population.
pub fn score_masks<'a>(pairs: impl IntoIterator<Item = (&'a ClassMask, &'a ClassMask)>) -> Result<ScoreReport> {
    let mut cm = ConfusionMatrix::new(5);
    let mut loc = ConfusionMatrix::new(2);
    for (pred, truth) in pairs {
        cm.merge(&confusion(pred, truth, 5)?)?;
        let bp: Vec<u8> = pred.data().iter().map(|&v| (v > 0) as u8).collect();
        let bt: Vec<u8> = truth.data().iter().map(|&v| (v > 0) as u8).collect();
        loc.accumulate(&bp, &bt)?;
    }
    let f = f1_per_class(&cm);
    let localization = f1(loc.true_positives(1), loc.false_positives(1), loc.false_negatives(1));
    Ok(ScoreReport {
        localization,
        no_damage: f[1],
        minor: f[2],
        major: f[3],
        destroyed: f[4],
        score: overall_score(localization, &[f[1], f[2], f[3], f[4]]),
        pixel_accuracy: cm.accuracy(),
        pixels: cm.total(),
    })
}
