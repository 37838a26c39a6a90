use serde::{Deserialize, Serialize};

use crate::bbox::BBox;

/// Largest center-error threshold of the precision curve, in pixels.
pub const MAX_PRECISION_THRESHOLD: usize = 50;
/// Points of the overlap grid `0, 0.05, ..., 1`.
pub const SUCCESS_POINTS: usize = 21;

pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let inter = iw.max(0.0) * ih.max(0.0);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_POINTS).map(|i| i as f64 / (SUCCESS_POINTS - 1) as f64).collect()
}

/// Fraction of frames with center error at most `t` for `t = 0..=50` px.
/// Failed frames carry an infinite error.
pub fn precision_curve(errors: &[f64]) -> Vec<f64> {
    let n = errors.len().max(1) as f64;
    (0..=MAX_PRECISION_THRESHOLD)
        .map(|t| errors.iter().filter(|&&e| e <= t as f64).count() as f64 / n)
        .collect()
}

/// Fraction of frames with overlap at least each grid threshold.
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    let n = ious.len().max(1) as f64;
    success_thresholds()
        .into_iter()
        .map(|t| ious.iter().filter(|&&o| o >= t).count() as f64 / n)
        .collect()
}

/// Area under the success curve: its mean over the 21-point grid.
pub fn auc(success: &[f64]) -> f64 {
    success.iter().sum::<f64>() / success.len().max(1) as f64
}

/// Per-frame metrics of one tracked sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub attributes: Vec<String>,
    pub center_errors: Vec<f64>,
    pub ious: Vec<f64>,
    pub precision: Vec<f64>,
    pub success: Vec<f64>,
    pub precision_at_20: f64,
    pub auc: f64,
    /// Frames without a usable prediction, scored as zero overlap.
    pub failed_frames: usize,
}

impl SequenceMetrics {
    /// Scores `predicted` against `groundtruth`. Missing or non-finite
    /// predictions count as failures.
    pub fn new(name: &str, attributes: &[String], predicted: &[BBox], groundtruth: &[BBox]) -> SequenceMetrics {
        let mut center_errors = Vec::with_capacity(groundtruth.len());
        let mut ious = Vec::with_capacity(groundtruth.len());
        let mut failed = 0;
        for (i, gt) in groundtruth.iter().enumerate() {
            match predicted.get(i).filter(|b| b.is_finite()) {
                Some(p) => {
                    center_errors.push(center_error(p, gt));
                    ious.push(iou(p, gt));
                }
                None => {
                    failed += 1;
                    center_errors.push(f64::INFINITY);
                    ious.push(0.0);
                }
            }
        }
        let precision = precision_curve(&center_errors);
        let success = success_curve(&ious);
        SequenceMetrics {
            name: name.to_string(),
            attributes: attributes.to_vec(),
            precision_at_20: precision[20],
            auc: auc(&success),
            center_errors,
            ious,
            precision,
            success,
            failed_frames: failed,
        }
    }

    pub fn frames(&self) -> usize {
        self.ious.len()
    }

    pub fn mean_iou(&self) -> f64 {
        self.ious.iter().sum::<f64>() / self.ious.len().max(1) as f64
    }
}

/// Precision is nondecreasing and success nonincreasing in their
/// thresholds, both within [0, 1].
pub fn curves_are_monotone(precision: &[f64], success: &[f64]) -> bool {
    let in_unit = |v: &f64| (0.0..=1.0).contains(v);
    precision.windows(2).all(|w| w[0] <= w[1])
        && success.windows(2).all(|w| w[0] >= w[1])
        && precision.iter().all(in_unit)
        && success.iter().all(in_unit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn center_error_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(center_error(&a, &a), 0.0);
        let b = BBox::new(3.0, 4.0, 2.0, 2.0);
        assert_eq!(center_error(&a, &b), 5.0);
        assert_eq!(center_error(&b, &a), 5.0);
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert_eq!(iou(&a, &BBox::new(0.5, 0.0, 1.0, 1.0)), 1.0 / 3.0);
        let z = BBox::new(1.0, 1.0, 0.0, 0.0);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn perfect_tracking_scores_one() {
        let gt: Vec<BBox> = (0..10).map(|i| BBox::new(i as f64, 2.0, 10.0, 8.0)).collect();
        let m = SequenceMetrics::new("s", &[], &gt, &gt);
        assert_eq!(m.precision_at_20, 1.0);
        assert_eq!(m.auc, 1.0);
        assert_eq!(m.failed_frames, 0);
    }

    #[test]
    fn missing_frames_are_failures() {
        let gt: Vec<BBox> = (0..4).map(|_| BBox::new(0.0, 0.0, 10.0, 10.0)).collect();
        let m = SequenceMetrics::new("s", &[], &gt[..1], &gt);
        assert_eq!(m.failed_frames, 3);
        assert_eq!(m.precision_at_20, 0.25);
        assert_eq!(m.success[1], 0.25);
        assert_eq!(m.success[0], 1.0);
    }

    #[test]
    fn auc_is_the_grid_mean() {
        let ious = [0.0, 0.1, 0.5, 0.52, 0.9, 1.0];
        let s = success_curve(&ious);
        assert_eq!(s.len(), SUCCESS_POINTS);
        let direct: f64 = success_thresholds()
            .iter()
            .map(|t| ious.iter().filter(|&&o| o >= *t).count() as f64 / ious.len() as f64)
            .sum::<f64>()
            / 21.0;
        assert_eq!(auc(&s), direct);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.0..40.0f64, 0.0..40.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let o = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&o));
            prop_assert_eq!(o, iou(&b, &a));
        }

        #[test]
        fn curves_are_monotone_for_any_trace(
            boxes in prop::collection::vec((arb_box(), arb_box()), 1..40)
        ) {
            let (p, g): (Vec<BBox>, Vec<BBox>) = boxes.into_iter().unzip();
            let m = SequenceMetrics::new("s", &[], &p, &g);
            prop_assert!(curves_are_monotone(&m.precision, &m.success));
            prop_assert!((0.0..=1.0).contains(&m.auc));
        }
    }
}
