//! Classification metrics and box overlap.
//!
//! Conventions: a confusion matrix is indexed `[true][pred]`, any metric
//! with a zero denominator is 0, and macro-F1 is the unweighted mean of the
//! per-class F1 scores.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn from_labels(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Empty { what: "class set" });
        }
        if y_true.is_empty() {
            return Err(Error::Empty { what: "label pairs" });
        }
        if y_true.len() != y_pred.len() {
            return Err(Error::CountMismatch {
                what: "predictions",
                expected: y_true.len(),
                got: y_pred.len(),
            });
        }
        let mut counts = vec![0usize; classes * classes];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t >= classes {
                return Err(Error::IndexOutOfRange {
                    what: "true label",
                    index: t,
                    bound: classes,
                });
            }
            if p >= classes {
                return Err(Error::IndexOutOfRange {
                    what: "predicted label",
                    index: p,
                    bound: classes,
                });
            }
            counts[t * classes + p] += 1;
        }
        Ok(Self { classes, counts })
    }

    /// Build directly from row-major `[true][pred]` counts.
    pub fn from_counts(classes: usize, counts: Vec<usize>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Empty { what: "class set" });
        }
        if counts.len() != classes * classes {
            return Err(Error::CountMismatch {
                what: "confusion counts",
                expected: classes * classes,
                got: counts.len(),
            });
        }
        if counts.iter().sum::<usize>() == 0 {
            return Err(Error::Empty { what: "label pairs" });
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> usize {
        self.counts[true_class * self.classes + pred_class]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: usize = (0..self.classes).map(|c| self.count(c, c)).sum();
        correct as f64 / self.total() as f64
    }

    pub fn precision(&self, class: usize) -> f64 {
        let tp = self.count(class, class);
        let predicted: usize = (0..self.classes).map(|t| self.count(t, class)).sum();
        ratio_or_zero(tp as f64, predicted as f64)
    }

    pub fn recall(&self, class: usize) -> f64 {
        let tp = self.count(class, class);
        let actual: usize = (0..self.classes).map(|p| self.count(class, p)).sum();
        ratio_or_zero(tp as f64, actual as f64)
    }

    pub fn f1(&self, class: usize) -> f64 {
        let p = self.precision(class);
        let r = self.recall(class);
        ratio_or_zero(2.0 * p * r, p + r)
    }

    pub fn macro_f1(&self) -> f64 {
        (0..self.classes).map(|c| self.f1(c)).sum::<f64>() / self.classes as f64
    }
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
}

pub fn classification_report(
    y_true: &[usize],
    y_pred: &[usize],
    classes: usize,
) -> Result<ClassificationReport> {
    let m = ConfusionMatrix::from_labels(y_true, y_pred, classes)?;
    Ok(ClassificationReport {
        accuracy: m.accuracy(),
        precision: (0..classes).map(|c| m.precision(c)).collect(),
        recall: (0..classes).map(|c| m.recall(c)).collect(),
        f1: (0..classes).map(|c| m.f1(c)).collect(),
        macro_f1: m.macro_f1(),
    })
}

/// Axis-aligned box given by min and max corners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0 <= x1 && y0 <= y1) || !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(Error::InvalidValue {
                what: "bounding box",
                detail: format!("corners ({x0},{y0})..({x1},{y1})"),
            });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    ratio_or_zero(inter, union)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn hand_worked_two_class_matrix() {
        let m = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        assert_abs_diff_eq!(m.accuracy(), 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(m.precision(0), 3.0 / 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.recall(0), 3.0 / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.f1(0), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.precision(1), 4.0 / 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.recall(1), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.f1(1), 8.0 / 11.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.macro_f1(), 23.0 / 33.0, epsilon = 1e-15);
    }

    #[test]
    fn matrix_from_labels_counts_pairs() {
        let y_true = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let y_pred = [0, 0, 0, 1, 0, 0, 1, 1, 1, 1];
        let m = ConfusionMatrix::from_labels(&y_true, &y_pred, 2).unwrap();
        assert_eq!(
            [m.count(0, 0), m.count(0, 1), m.count(1, 0), m.count(1, 1)],
            [3, 1, 2, 4]
        );
    }

    #[test]
    fn perfect_predictions_score_one() {
        let y = [0, 1, 2, 1, 0, 2];
        let r = classification_report(&y, &y, 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert!(r.precision.iter().all(|&p| p == 1.0));
        assert!(r.recall.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn absent_class_gets_zero_scores() {
        // class 2 never appears as truth or prediction
        let y_true = [0, 1, 0, 1];
        let y_pred = [0, 1, 1, 1];
        let r = classification_report(&y_true, &y_pred, 3).unwrap();
        assert_eq!(r.precision[2], 0.0);
        assert_eq!(r.recall[2], 0.0);
        assert_eq!(r.f1[2], 0.0);
    }

    #[test]
    fn input_validation() {
        assert!(matches!(
            ConfusionMatrix::from_labels(&[], &[], 2),
            Err(Error::Empty { .. })
        ));
        assert!(matches!(
            ConfusionMatrix::from_labels(&[0, 1], &[0], 2),
            Err(Error::CountMismatch { .. })
        ));
        assert!(matches!(
            ConfusionMatrix::from_labels(&[0, 2], &[0, 1], 2),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            ConfusionMatrix::from_labels(&[0], &[5], 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    /// Recompute every metric straight from the label pairs with per-class
    /// scans, no confusion matrix involved.
    fn brute_force_report(y_true: &[usize], y_pred: &[usize], classes: usize) -> ClassificationReport {
        let n = y_true.len() as f64;
        let correct = y_true.iter().zip(y_pred).filter(|(t, p)| t == p).count();
        let mut precision = Vec::new();
        let mut recall = Vec::new();
        let mut f1 = Vec::new();
        for c in 0..classes {
            let tp = y_true
                .iter()
                .zip(y_pred)
                .filter(|&(&t, &p)| t == c && p == c)
                .count() as f64;
            let pred_c = y_pred.iter().filter(|&&p| p == c).count() as f64;
            let true_c = y_true.iter().filter(|&&t| t == c).count() as f64;
            let p = if pred_c == 0.0 { 0.0 } else { tp / pred_c };
            let r = if true_c == 0.0 { 0.0 } else { tp / true_c };
            let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            precision.push(p);
            recall.push(r);
            f1.push(f);
        }
        let macro_f1 = f1.iter().sum::<f64>() / classes as f64;
        ClassificationReport {
            accuracy: correct as f64 / n,
            precision,
            recall,
            f1,
            macro_f1,
        }
    }

    #[test]
    fn report_matches_brute_force_on_random_labels() {
        let mut rng = crate::rng::RngStream::new(17);
        for _ in 0..200 {
            let classes = 2 + (rng.next_u64() % 4) as usize;
            let n = 1 + (rng.next_u64() % 40) as usize;
            let y_true: Vec<usize> = (0..n).map(|_| rng.next_index(classes)).collect();
            let y_pred: Vec<usize> = (0..n).map(|_| rng.next_index(classes)).collect();
            let got = classification_report(&y_true, &y_pred, classes).unwrap();
            let want = brute_force_report(&y_true, &y_pred, classes);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn iou_hand_cases() {
        let unit = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let far = BoundingBox::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(iou(&unit, &far), 0.0);
        assert_eq!(iou(&unit, &unit), 1.0);
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BoundingBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        assert_abs_diff_eq!(iou(&a, &b), 1.0 / 7.0, epsilon = 1e-15);
        // containment: inner area 1, outer 16
        let outer = BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let inner = BoundingBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
        assert_abs_diff_eq!(iou(&outer, &inner), 1.0 / 16.0, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_boxes() {
        let point = BoundingBox::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(iou(&point, &point), 0.0);
        assert!(BoundingBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn touching_boxes_overlap_nothing() {
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = BoundingBox::new(1.0, 0.0, 2.0, 1.0).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)
        ) {
            let y_true: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let y_pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let r = classification_report(&y_true, &y_pred, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.accuracy));
            prop_assert!((0.0..=1.0).contains(&r.macro_f1));
            for v in r.precision.iter().chain(&r.recall).chain(&r.f1) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn iou_is_symmetric_and_bounded(
            ax in -5.0f64..5.0, ay in -5.0f64..5.0, aw in 0.1f64..4.0, ah in 0.1f64..4.0,
            bx in -5.0f64..5.0, by in -5.0f64..5.0, bw in 0.1f64..4.0, bh in 0.1f64..4.0,
        ) {
            let a = BoundingBox::new(ax, ay, ax + aw, ay + ah).unwrap();
            let b = BoundingBox::new(bx, by, bx + bw, by + bh).unwrap();
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
