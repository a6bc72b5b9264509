//! Confusion-matrix evaluation: per-class IoU and accuracy, their means, and
//! the binary water metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::numerics::{Real, Tensor};

/// K×K pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            bail!(Argument, "a {k}×{k} confusion matrix needs {} counts", k * k);
        }
        Ok(Self { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel whose ground truth is not `ignore`.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != truth.len() {
            bail!(Argument, "{} predictions for {} labels", pred.len(), truth.len());
        }
        for (&p, &g) in pred.iter().zip(truth) {
            if g == ignore {
                continue;
            }
            if g as usize >= self.k || p as usize >= self.k {
                bail!(Data, "class id {} outside 0..{}", g.max(p), self.k);
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.k != other.k {
            bail!(Argument, "cannot merge {}-class and {}-class matrices", self.k, other.k);
        }
        let counts = self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect();
        Ok(Self { k: self.k, counts })
    }

    fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.k).map(|g| self.get(g, c)).sum();
        (tp, col - tp, row - tp)
    }

    /// `TP/(TP+FP+FN)`; `None` for a class absent from truth and prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let (tp, fp, fn_) = self.tp_fp_fn(c);
                ratio(tp, tp + fp + fn_)
            })
            .collect()
    }

    /// `TP/(TP+FN)`; `None` for a class absent from the truth.
    pub fn acc_per_class(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let (tp, _, fn_) = self.tp_fp_fn(c);
                ratio(tp, tp + fn_)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Option<f64> {
        mean_defined(&self.iou_per_class())
    }

    pub fn mean_acc(&self) -> Option<f64> {
        mean_defined(&self.acc_per_class())
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let diag: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        ratio(diag, self.total())
    }

    pub fn report(&self) -> MetricReport {
        MetricReport {
            iou: self.iou_per_class(),
            acc: self.acc_per_class(),
            miou: self.mean_iou(),
            macc: self.mean_acc(),
            pixel_acc: self.pixel_accuracy(),
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Mean over defined entries; undefined classes are left out.
pub fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = v.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub iou: Vec<Option<f64>>,
    pub acc: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
    pub pixel_acc: Option<f64>,
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WaterCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl WaterCounts {
    /// Binarizes with `prob >= threshold` and counts against binary labels.
    pub fn accumulate<T: Real>(&mut self, probs: &[T], labels: &[u8], threshold: f64, ignore: u8) -> Result<()> {
        if probs.len() != labels.len() {
            bail!(Argument, "{} probabilities for {} labels", probs.len(), labels.len());
        }
        for (&p, &l) in probs.iter().zip(labels) {
            if l == ignore {
                continue;
            }
            let water = p.to_f64() >= threshold;
            match (l, water) {
                (1, true) => self.tp += 1,
                (0, true) => self.fp += 1,
                (1, false) => self.fn_ += 1,
                (0, false) => self.tn += 1,
                _ => bail!(Data, "water label {l} is not binary"),
            }
        }
        Ok(())
    }

    pub fn merge(&self, o: &Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }

    pub fn metrics(&self) -> WaterMetrics {
        WaterMetrics {
            iou_water: ratio(self.tp, self.tp + self.fp + self.fn_),
            precision: ratio(self.tp, self.tp + self.fp),
            recall: ratio(self.tp, self.tp + self.fn_),
        }
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaterMetrics {
    pub iou_water: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn water_metrics<T: Real>(probs: &[T], labels: &[u8], threshold: f64, ignore: u8) -> Result<WaterMetrics> {
    let mut c = WaterCounts::default();
    c.accumulate(probs, labels, threshold, ignore)?;
    Ok(c.metrics())
}

/// Per-pixel argmax over the class axis of N×K×H×W scores, in N·H·W order.
/// Ties go to the lowest class id.
pub fn argmax_classes<T: Real>(scores: &Tensor<T>) -> Result<Vec<u8>> {
    let s = scores.shape();
    if s.len() != 4 || s[1] == 0 || s[1] > 255 {
        bail!(Argument, "expected N×K×H×W scores with 1 ≤ K ≤ 255, got {s:?}");
    }
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = scores.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        let base = b * k * hw;
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * hw + p] > d[base + best * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1], &[0, 1, 0], 255).unwrap();
        assert_eq!(cm.counts(), &[1, 1, 0, 1]);
        assert_eq!(cm.iou_per_class(), vec![Some(0.5), Some(0.5)]);
        assert_eq!(cm.mean_iou(), Some(0.5));
        assert_eq!(cm.acc_per_class(), vec![Some(0.5), Some(1.0)]);
        assert_eq!(cm.mean_acc(), Some(0.75));
        assert!(matches!(cm.accumulate(&[2], &[0], 255), Err(crate::Error::Data(_))));
    }

    #[test]
    fn threshold_is_inclusive() {
        let m = water_metrics(&[0.5f64, 0.49], &[1, 0], 0.5, 255).unwrap();
        assert_eq!((m.iou_water, m.precision, m.recall), (Some(1.0), Some(1.0), Some(1.0)));
    }
}
