use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Rect;

/// Center-error radius for precision, in pixels.
pub const PRECISION_RADIUS_PX: f64 = 20.0;
/// Center-error radius for normalized precision, in ground-truth box units.
pub const NORM_PRECISION_RADIUS: f64 = 0.2;
/// Success-rate comparison used throughout.
pub const SR_RULE: &str = "iou > t";

/// Intersection over union of two frame boxes, in `[0, 1]`.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    // Areas from corner differences, like the intersection, so identical
    // boxes give exactly 1.
    let extent = |r: &Rect| ((r.x + r.w) - r.x).max(0.0) * ((r.y + r.h) - r.y).max(0.0);
    let inter = a.intersection_area(b);
    let union = extent(a) + extent(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Success-rate thresholds `0, 0.05, …, 1`.
pub fn auc_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Fraction of overlaps strictly above `t`.
pub fn success_rate(ious: &[f64], t: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64
}

/// Mean success rate over [`auc_thresholds`].
pub fn success_auc(ious: &[f64]) -> f64 {
    let ts = auc_thresholds();
    ts.iter().map(|&t| success_rate(ious, t)).sum::<f64>() / ts.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
}

impl MetricsReport {
    pub fn from_series(ious: Vec<f64>, center_errors: Vec<f64>, norm_errors: &[f64]) -> Self {
        let n = ious.len().max(1) as f64;
        let frac = |v: &[f64], r: f64| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().filter(|&&e| e <= r).count() as f64 / v.len() as f64
            }
        };
        Self {
            ao: ious.iter().sum::<f64>() / n,
            sr50: success_rate(&ious, 0.5),
            sr75: success_rate(&ious, 0.75),
            auc: success_auc(&ious),
            precision: frac(&center_errors, PRECISION_RADIUS_PX),
            norm_precision: frac(norm_errors, NORM_PRECISION_RADIUS),
            ious,
            center_errors,
        }
    }

    /// Mean of each scalar metric over several reports; series are
    /// concatenated.
    pub fn mean_of(reports: &[MetricsReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            ao: avg(|r| r.ao),
            sr50: avg(|r| r.sr50),
            sr75: avg(|r| r.sr75),
            auc: avg(|r| r.auc),
            precision: avg(|r| r.precision),
            norm_precision: avg(|r| r.norm_precision),
            ious: reports
                .iter()
                .flat_map(|r| r.ious.iter().copied())
                .collect(),
            center_errors: reports
                .iter()
                .flat_map(|r| r.center_errors.iter().copied())
                .collect(),
        }
    }

    /// One JSON object on one line, tagged with `sequence`.
    pub fn json_line(&self, sequence: &str) -> String {
        let v = serde_json::json!({
            "sequence": sequence,
            "frames": self.ious.len(),
            "ao": self.ao,
            "sr50": self.sr50,
            "sr75": self.sr75,
            "auc": self.auc,
            "p": self.precision,
            "pn": self.norm_precision,
            "sr_rule": SR_RULE,
            "ious": self.ious,
        });
        v.to_string()
    }
}

/// Overlap, precision and normalized precision of predicted against
/// ground-truth frame boxes.
pub fn compute_metrics(pred: &[Rect], gt: &[Rect]) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    let ious = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let mut center = Vec::with_capacity(gt.len());
    let mut norm = Vec::with_capacity(gt.len());
    for (p, g) in pred.iter().zip(gt) {
        let (pc, gc) = (p.center(), g.center());
        let (dx, dy) = (pc.0 - gc.0, pc.1 - gc.1);
        center.push((dx * dx + dy * dy).sqrt());
        let (nx, ny) = (
            dx / g.w.max(f64::MIN_POSITIVE),
            dy / g.h.max(f64::MIN_POSITIVE),
        );
        norm.push((nx * nx + ny * ny).sqrt());
    }
    Ok(MetricsReport::from_series(ious, center, &norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = Rect::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Rect::new(2.0, 2.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &Rect::new(0.5, 0.0, 1.0, 1.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn series_fixtures() {
        let r = MetricsReport::from_series(vec![1.0, 0.5, 0.0], vec![0.0; 3], &[0.0; 3]);
        assert_eq!(r.ao, 0.5);
        let r = MetricsReport::from_series(vec![0.6, 0.4], vec![0.0; 2], &[0.0; 2]);
        assert_eq!(r.sr50, 0.5);
    }

    #[test]
    fn perfect_predictions() {
        let gt = vec![
            Rect::new(3.0, 4.0, 10.0, 12.0),
            Rect::new(5.0, 4.0, 11.0, 9.0),
        ];
        let r = compute_metrics(&gt, &gt).unwrap();
        assert_eq!(
            (r.ao, r.sr50, r.sr75, r.precision, r.norm_precision),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
        assert!(compute_metrics(&gt[..1], &gt).is_err());
    }

    proptest! {
        #[test]
        fn metric_invariants(ious in prop::collection::vec(0.0f64..=1.0, 1..50)) {
            let r = MetricsReport::from_series(ious.clone(), vec![0.0; ious.len()], &vec![0.0; ious.len()]);
            prop_assert_eq!(r.ao, ious.iter().sum::<f64>() / ious.len() as f64);
            let ts = auc_thresholds();
            let srs: Vec<f64> = ts.iter().map(|&t| success_rate(&ious, t)).collect();
            prop_assert!(srs.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(r.auc >= srs[20] && r.auc <= srs[0]);
            for v in [r.ao, r.sr50, r.sr75, r.auc] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
