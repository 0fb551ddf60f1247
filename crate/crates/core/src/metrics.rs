//! Segmentation metrics: pixel accuracy, mean per-class accuracy, mean IoU.
//! Classes absent from ground truth are excluded from the means.

use crate::error::{CtxError, Result};
use crate::labels::{LabelMap, IGNORE};
use std::io::Write;

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub pixel_accuracy: f64,
    pub mean_accuracy: f64,
    /// Mean IoU over classes present in ground truth.
    pub iou: f64,
    /// Per class: None when absent from ground truth.
    pub per_class_iou: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "pixel_acc,mean_acc,mean_iou")?;
        for c in 0..self.per_class_iou.len() {
            write!(w, ",iou_class{c}")?;
        }
        writeln!(w)?;
        write!(w, "{:.6},{:.6},{:.6}", self.pixel_accuracy, self.mean_accuracy, self.iou)?;
        for v in &self.per_class_iou {
            match v {
                Some(x) => write!(w, ",{x:.6}")?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
        Ok(())
    }
}

/// Accumulates a KxK confusion matrix over (truth, prediction) pairs.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    pub k: usize,
    /// counts[truth * k + pred]
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.h, pred.w) != (truth.h, truth.w) {
            return Err(CtxError::ShapeMismatch(format!(
                "metrics: pred {}x{} vs truth {}x{}",
                pred.h, pred.w, truth.h, truth.w
            )));
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == IGNORE {
                continue;
            }
            if t as usize >= self.k || (p != IGNORE && p as usize >= self.k) {
                return Err(CtxError::InvalidArgument(format!(
                    "metrics: label out of range for K = {}",
                    self.k
                )));
            }
            if p == IGNORE {
                continue;
            }
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let k = self.k;
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..k).map(|c| self.counts[c * k + c]).sum();
        let mut per_class_iou = Vec::with_capacity(k);
        let mut accs = Vec::new();
        let mut ious = Vec::new();
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let gt: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
            let pr: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
            if gt == 0 {
                per_class_iou.push(None);
                continue;
            }
            let denom = gt + pr - tp; // TP + FP + FN
            let iou = if denom == 0 { 0.0 } else { tp as f64 / denom as f64 };
            per_class_iou.push(Some(iou));
            ious.push(iou);
            accs.push(tp as f64 / gt as f64);
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        MetricsReport {
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            mean_accuracy: mean(&accs),
            iou: mean(&ious),
            per_class_iou,
        }
    }
}

pub fn compute_metrics(pred: &LabelMap, truth: &LabelMap, k: usize) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, truth)?;
    Ok(cm.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let m = LabelMap::new(2, 2, vec![0, 1, 2, 1]);
        let r = compute_metrics(&m, &m, 3).unwrap();
        assert_eq!(r.pixel_accuracy, 1.0);
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.iou, 1.0);
    }

    #[test]
    fn disjoint_single_class() {
        let pred = LabelMap::filled(2, 2, 0);
        let truth = LabelMap::filled(2, 2, 1);
        let r = compute_metrics(&pred, &truth, 2).unwrap();
        assert_eq!(r.pixel_accuracy, 0.0);
        assert_eq!(r.iou, 0.0);
    }

    #[test]
    fn hand_enumerated_case() {
        // truth [[0,0],[1,1]], pred [[0,1],[1,1]]:
        // class 0: TP 1, FP 0, FN 1 -> IoU 1/2; class 1: TP 2, FP 1, FN 0 -> 2/3
        let truth = LabelMap::new(2, 2, vec![0, 0, 1, 1]);
        let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1]);
        let r = compute_metrics(&pred, &truth, 2).unwrap();
        assert!((r.pixel_accuracy - 0.75).abs() < 1e-12);
        assert!((r.per_class_iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((r.per_class_iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.iou - 7.0 / 12.0).abs() < 1e-12);
        assert!((r.mean_accuracy - 0.75).abs() < 1e-12); // recalls 1/2 and 1
    }

    #[test]
    fn absent_class_excluded() {
        let truth = LabelMap::new(1, 2, vec![0, 0]);
        let pred = LabelMap::new(1, 2, vec![0, 2]);
        let r = compute_metrics(&pred, &truth, 3).unwrap();
        assert!(r.per_class_iou[1].is_none());
        assert!(r.per_class_iou[2].is_none()); // class 2 predicted but not in GT
        assert!((r.iou - 0.5).abs() < 1e-12); // only class 0 counts: TP1 FP0 FN1
        assert_eq!(r.mean_accuracy, 0.5);
    }

    #[test]
    fn ignore_pixels_excluded() {
        let truth = LabelMap::new(1, 3, vec![0, IGNORE, 1]);
        let pred = LabelMap::new(1, 3, vec![0, 1, 0]);
        let r = compute_metrics(&pred, &truth, 2).unwrap();
        assert!((r.pixel_accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let a = LabelMap::filled(2, 2, 0);
        let b = LabelMap::filled(2, 3, 0);
        assert!(compute_metrics(&a, &b, 2).is_err());
    }

    #[test]
    fn csv_header_shape() {
        let m = LabelMap::new(1, 2, vec![0, 1]);
        let r = compute_metrics(&m, &m, 3).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("pixel_acc,mean_acc,mean_iou,iou_class0,iou_class1,iou_class2\n"));
        assert_eq!(s.lines().count(), 2);
    }
}
