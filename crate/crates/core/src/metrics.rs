//! Confusion-matrix accumulation and per-class IoU / F1 / accuracy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::ops::activation::IGNORE_LABEL;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
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

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::dim("confusion_matrix", "counts", classes * classes, counts.len()));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel whose ground truth is not the ignore label.
    pub fn accumulate_slices(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim("accumulate", "pixels", gt.len(), pred.len()));
        }
        let k = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= k {
                return Err(Error::precondition("accumulate", format!("ground truth {g} outside 0..{k}")));
            }
            if p as usize >= k {
                return Err(Error::precondition("accumulate", format!("prediction {p} outside 0..{k}")));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.rows, pred.cols) != (gt.rows, gt.cols) {
            return Err(Error::Shape {
                op: "accumulate",
                lhs: vec![pred.rows, pred.cols],
                rhs: vec![gt.rows, gt.cols],
            });
        }
        self.accumulate_slices(&pred.data, &gt.data)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim("merge", "classes", self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn compute(&self) -> Metrics {
        let k = self.classes;
        let mut per_class = Vec::with_capacity(k);
        for c in 0..k {
            let tp = self.get(c, c);
            let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let col: u64 = (0..k).map(|t| self.get(t, c)).sum();
            let (fp, fn_) = (col - tp, row - tp);
            let present = tp + fp + fn_ > 0;
            let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
            per_class.push(ClassMetrics {
                class: c,
                tp,
                fp,
                fn_,
                iou: ratio(tp, tp + fp + fn_),
                f1: ratio(2 * tp, 2 * tp + fp + fn_),
                acc: ratio(tp, tp + fn_),
                present,
            });
        }
        let scored: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.present).collect();
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if scored.is_empty() {
                0.0
            } else {
                scored.iter().map(|m| f(m)).sum::<f64>() / scored.len() as f64
            }
        };
        Metrics {
            miou: mean(|m| m.iou),
            mf1: mean(|m| m.f1),
            macc: mean(|m| m.acc),
            per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou: f64,
    pub f1: f64,
    pub acc: f64,
    /// False when the class appears in neither ground truth nor prediction;
    /// such classes are left out of the means.
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub mf1: f64,
    pub macc: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl Metrics {
    /// `class,IoU,F1,Acc` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,IoU,F1,Acc\n");
        for m in &self.per_class {
            if m.present {
                let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", m.class, m.iou, m.f1, m.acc);
            } else {
                let _ = writeln!(s, "{},absent,absent,absent", m.class);
            }
        }
        let _ = writeln!(s, "mean,{:.6},{:.6},{:.6}", self.miou, self.mf1, self.macc);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(t, p), if t == p { 2 } else { 0 });
            }
        }
        let m = cm.compute();
        assert_eq!((m.miou, m.mf1, m.macc), (1.0, 1.0, 1.0));
    }

    #[test]
    fn ignore_label_is_not_counted() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate_slices(&[0, 1, 1], &[255, 255, 255]).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert!(cm.accumulate_slices(&[2], &[0]).is_err());
        assert!(cm.accumulate_slices(&[0], &[2]).is_err());
    }

    #[test]
    fn two_class_hand_example() {
        let m = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap().compute();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(m.per_class[0].iou, 0.5) && close(m.per_class[1].iou, 4.0 / 7.0));
        assert!(close(m.per_class[0].f1, 6.0 / 9.0) && close(m.per_class[1].f1, 8.0 / 11.0));
        assert!(close(m.per_class[0].acc, 0.75) && close(m.per_class[1].acc, 2.0 / 3.0));
        assert!(close(m.miou, (0.5 + 4.0 / 7.0) / 2.0));
        assert!(close(m.mf1, (6.0 / 9.0 + 8.0 / 11.0) / 2.0));
        assert!(close(m.macc, (0.75 + 2.0 / 3.0) / 2.0));
        assert!((m.miou - 0.535714).abs() < 1e-6 && (m.mf1 - 0.696970).abs() < 1e-6);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate_slices(&[0, 1], &[0, 1]).unwrap();
        let m = cm.compute();
        assert!(!m.per_class[2].present);
        assert_eq!(m.miou, 1.0);
        assert!(m.to_csv().contains("2,absent"));
    }

    #[test]
    fn matches_per_pixel_oracle_and_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 5;
        let gt: Vec<u8> = (0..256)
            .map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..k) as u8 })
            .collect();
        let pred: Vec<u8> = (0..256).map(|_| rng.random_range(0..k) as u8).collect();
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate_slices(&pred, &gt).unwrap();
        for t in 0..k {
            for p in 0..k {
                let n = gt.iter().zip(&pred).filter(|&(&g, &q)| g as usize == t && q as usize == p).count();
                assert_eq!(cm.get(t, p), n as u64);
            }
        }
        let mut a = ConfusionMatrix::new(k);
        let mut b = ConfusionMatrix::new(k);
        a.accumulate_slices(&pred[..100], &gt[..100]).unwrap();
        b.accumulate_slices(&pred[100..], &gt[100..]).unwrap();
        b.merge(&a).unwrap();
        assert_eq!(b, cm);
        for c in cm.compute().per_class {
            assert!((c.f1 - 2.0 * c.iou / (1.0 + c.iou)).abs() < 1e-12);
            assert!(c.iou <= c.f1);
        }
    }

    #[test]
    fn json_and_csv_forms() {
        let m = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap().compute();
        let json = serde_json::to_value(&m).unwrap();
        assert_eq!(json["per_class"][0]["fn"], 1);
        let csv = m.to_csv();
        assert_eq!(csv.lines().next(), Some("class,IoU,F1,Acc"));
        assert_eq!(csv.lines().last(), Some("mean,0.535714,0.696970,0.708333"));
    }
}
