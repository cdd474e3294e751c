//! Pixel IoU, 3D point precision/recall and their report formats.
//!
//! All scores are percentages.

use std::fmt::Write as _;

/// Counts indexed `[gt][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Labels outside `0..classes` are ignored.
    pub fn add(&mut self, gt: u8, pred: u8) {
        let (g, p) = (gt as usize, pred as usize);
        if g < self.classes && p < self.classes {
            self.counts[g * self.classes + p] += 1;
        }
    }

    /// Accumulates one label image pair; `ignore[i]` drops pixel `i`.
    pub fn add_labels(&mut self, pred: &[u8], gt: &[u8], ignore: Option<&[bool]>) {
        assert_eq!(pred.len(), gt.len(), "label buffers differ in length");
        for i in 0..pred.len() {
            if ignore.is_some_and(|m| m[i]) {
                continue;
            }
            self.add(gt[i], pred[i]);
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn gt_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn pred_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    /// Fraction of correct entries, in percent (0 when empty).
    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        100.0 * diag as f64 / t as f64
    }

    pub fn iou(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let union = self.gt_total(c) + self.pred_total(c) - tp;
                (union > 0).then(|| 100.0 * tp as f64 / union as f64)
            })
            .collect();
        IouReport {
            mean: mean_present(&per_class),
            per_class,
        }
    }
}

fn mean_present(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over present classes.
    pub mean: f64,
}

/// Dataset-level IoU over every unmasked pixel of `pred` / `gt`.
pub fn pixel_iou(pred: &[u8], gt: &[u8], ignore: Option<&[bool]>, classes: usize) -> IouReport {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add_labels(pred, gt, ignore);
    cm.iou()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrReport {
    /// 0 when the class was never predicted.
    pub precision: Vec<f64>,
    /// 0 when the class never occurs.
    pub recall: Vec<f64>,
    /// Classes occurring in the prediction or the ground truth.
    pub present: Vec<bool>,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

/// Per-class precision and recall of 3D point labels. Unlabeled points
/// count as misses of their ground-truth class.
pub fn point_pr(pred: &[Option<u8>], gt: &[u8], classes: usize) -> PrReport {
    assert_eq!(pred.len(), gt.len(), "point label buffers differ in length");
    let mut tp = vec![0u64; classes];
    let mut pred_n = vec![0u64; classes];
    let mut gt_n = vec![0u64; classes];
    for (p, g) in pred.iter().zip(gt) {
        let g = *g as usize;
        if g < classes {
            gt_n[g] += 1;
        }
        if let Some(p) = p {
            let p = *p as usize;
            if p < classes {
                pred_n[p] += 1;
                if p == g {
                    tp[p] += 1;
                }
            }
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    let precision: Vec<f64> = (0..classes).map(|c| ratio(tp[c], pred_n[c])).collect();
    let recall: Vec<f64> = (0..classes).map(|c| ratio(tp[c], gt_n[c])).collect();
    let present: Vec<bool> = (0..classes).map(|c| pred_n[c] + gt_n[c] > 0).collect();
    let mean = |v: &[f64]| {
        let sel: Vec<Option<f64>> = v.iter().zip(&present).map(|(x, p)| p.then_some(*x)).collect();
        mean_present(&sel)
    };
    PrReport {
        mean_precision: mean(&precision),
        mean_recall: mean(&recall),
        precision,
        recall,
        present,
    }
}

/// Fraction of points whose label matches, in percent. Unlabeled points
/// count as wrong.
pub fn point_accuracy(pred: &[Option<u8>], gt: &[u8]) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let ok = pred.iter().zip(gt).filter(|(p, g)| **p == Some(**g)).count();
    100.0 * ok as f64 / gt.len() as f64
}

/// Metrics for one evaluation, printable as a table or CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub iou: Option<IouReport>,
    pub pixel_accuracy: Option<f64>,
    pub points: Option<PrReport>,
    pub point_accuracy: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.2}"))
}

impl MetricsReport {
    fn rows(&self) -> Vec<(String, Option<f64>, Option<f64>, Option<f64>)> {
        let mut rows = Vec::new();
        for (c, name) in self.class_names.iter().enumerate() {
            let iou = self.iou.as_ref().and_then(|r| r.per_class.get(c).copied().flatten());
            let (p, r) = match &self.points {
                Some(pr) if pr.present.get(c) == Some(&true) => (Some(pr.precision[c]), Some(pr.recall[c])),
                _ => (None, None),
            };
            rows.push((name.clone(), iou, p, r));
        }
        rows.push((
            "mean".into(),
            self.iou.as_ref().map(|r| r.mean),
            self.points.as_ref().map(|r| r.mean_precision),
            self.points.as_ref().map(|r| r.mean_recall),
        ));
        rows
    }

    /// `class,iou,precision,recall`; missing values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou,precision,recall\n");
        for (name, iou, p, r) in self.rows() {
            let _ = writeln!(out, "{name},{},{},{}", cell(iou), cell(p), cell(r));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.class_names.iter().map(|n| n.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}  {:>7}  {:>9}  {:>7}\n", "class", "iou", "precision", "recall");
        for (name, iou, p, r) in self.rows() {
            let dash = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
            let _ = writeln!(out, "{name:<width$}  {:>7}  {:>9}  {:>7}", dash(iou), dash(p), dash(r));
        }
        if let Some(a) = self.pixel_accuracy {
            let _ = writeln!(out, "pixel accuracy {a:.2}");
        }
        if let Some(a) = self.point_accuracy {
            let _ = writeln!(out, "point accuracy {a:.2}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_iou() {
        let r = pixel_iou(&[0, 1, 1, 1], &[0, 0, 1, 1], None, 2);
        assert_eq!(r.per_class, vec![Some(50.0), Some(200.0 / 3.0)]);
        assert_eq!(r.mean, (50.0 + 200.0 / 3.0) / 2.0);
    }

    #[test]
    fn perfect_and_disjoint() {
        let l = [0, 2, 2, 3];
        let r = pixel_iou(&l, &l, None, 5);
        assert_eq!(r.per_class, vec![Some(100.0), None, Some(100.0), Some(100.0), None]);
        assert_eq!(r.mean, 100.0);
        let r = pixel_iou(&[1, 1], &[0, 0], None, 2);
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn ignore_mask_drops_pixels() {
        let r = pixel_iou(&[0, 1], &[0, 0], Some(&[false, true]), 2);
        assert_eq!(r.per_class, vec![Some(100.0), None]);
    }

    #[test]
    fn all_predicted_zero() {
        let r = point_pr(&[Some(0); 4], &[0, 0, 1, 1], 2);
        assert_eq!(r.precision, vec![50.0, 0.0]);
        assert_eq!(r.recall, vec![100.0, 0.0]);
        assert_eq!(r.mean_precision, 25.0);
    }

    #[test]
    fn unlabeled_points_are_misses() {
        let r = point_pr(&[None, Some(1)], &[1, 1], 2);
        assert_eq!(r.recall[1], 50.0);
        assert_eq!(r.precision[1], 100.0);
        assert_eq!(point_accuracy(&[None, Some(1)], &[1, 1]), 50.0);
    }

    #[test]
    fn report_formats() {
        let rep = MetricsReport {
            class_names: vec!["a".into(), "b".into()],
            iou: Some(pixel_iou(&[0, 1, 1, 1], &[0, 0, 1, 1], None, 2)),
            pixel_accuracy: Some(75.0),
            points: None,
            point_accuracy: None,
        };
        let csv = rep.to_csv();
        assert_eq!(csv.lines().next(), Some("class,iou,precision,recall"));
        assert_eq!(csv.lines().nth(1), Some("a,50.00,,"));
        assert_eq!(csv.lines().count(), 4);
        assert!(rep.to_table().contains("pixel accuracy 75.00"));
    }
}
