//! Training losses: penalty-reduced focal loss on the classification map,
//! generalized IoU and L1 on the regressed box, and their weighted sum.

use crate::error::{Error, Result};
use crate::geometry::CenterBox;
use crate::numerics::Tensor;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const PROB_EPS: f64 = 1e-12;

/// Weights of the box terms in the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub iou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { iou: 2.0, l1: 5.0 }
    }
}

impl LossWeights {
    pub fn total(&self, cls: f64, giou: f64, l1: f64) -> Result<f64> {
        if !(cls.is_finite() && giou.is_finite() && l1.is_finite()) {
            return Err(Error::NonFinite("total_loss input".into()));
        }
        Ok(cls + self.iou * giou + self.l1 * l1)
    }
}

/// `L_cls + 2·L_giou + 5·L_1`
pub fn total_loss(cls: f64, giou: f64, l1: f64) -> Result<f64> {
    LossWeights::default().total(cls, giou, l1)
}

pub(crate) struct FocalResult {
    pub value: f64,
    pub grad: Vec<f64>,
    pub clamped: usize,
}

pub(crate) fn focal_forward_backward(p: &[f64], gt: &[f64]) -> Result<FocalResult> {
    if gt.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Input(
            "focal target values must lie in [0, 1]".into(),
        ));
    }
    let n_pos = gt.iter().filter(|t| **t == 1.0).count();
    if n_pos == 0 {
        return Err(Error::Input("focal target has no peak cell".into()));
    }
    let norm = 1.0 / n_pos as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    let mut clamped = 0;
    for (i, (&raw, &t)) in p.iter().zip(gt).enumerate() {
        let q = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let was_clamped = q != raw;
        if was_clamped {
            clamped += 1;
        }
        let (l, dl) = if t == 1.0 {
            let om = 1.0 - q;
            let l = -om.powf(FOCAL_ALPHA) * q.ln();
            let dl = FOCAL_ALPHA * om.powf(FOCAL_ALPHA - 1.0) * q.ln() - om.powf(FOCAL_ALPHA) / q;
            (l, dl)
        } else {
            let w = (1.0 - t).powf(FOCAL_BETA);
            let l = -w * q.powf(FOCAL_ALPHA) * (1.0 - q).ln();
            let dl = -w
                * (FOCAL_ALPHA * q.powf(FOCAL_ALPHA - 1.0) * (1.0 - q).ln()
                    - q.powf(FOCAL_ALPHA) / (1.0 - q));
            (l, dl)
        };
        value += l * norm;
        if !was_clamped {
            grad[i] = dl * norm;
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("focal_loss".into()));
    }
    if clamped > 0 {
        log::debug!("focal loss clamped {clamped} probabilities");
    }
    Ok(FocalResult {
        value,
        grad,
        clamped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalLoss {
    pub value: f64,
    /// Probabilities that fell outside `(0, 1)` and were clamped.
    pub clamped: usize,
}

/// Focal loss (α = 2, β = 4) of a probability map against a Gaussian target,
/// normalized by the number of exact-1 target cells.
pub fn focal_loss(cls: &Tensor, gt_gaussian: &Tensor) -> Result<FocalLoss> {
    if cls.len() != gt_gaussian.len() {
        return Err(Error::Shape("focal_loss map sizes differ".into()));
    }
    let r = focal_forward_backward(cls.data(), gt_gaussian.data())?;
    Ok(FocalLoss {
        value: r.value,
        clamped: r.clamped,
    })
}

/// Gaussian classification target on a `g×g` grid, peaking at exactly 1 in
/// the cell holding the box center. σ = max(1, g·min(w, h)/4) cells.
pub fn gaussian_target(gt: &CenterBox, grid: usize) -> Tensor {
    let (ci, cj) = center_cell(gt, grid);
    let sigma = (grid as f64 * gt.w.min(gt.h) / 4.0).max(1.0);
    let mut data = vec![0.0; grid * grid];
    for i in 0..grid {
        for j in 0..grid {
            let d2 = (i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2);
            data[i * grid + j] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    Tensor::new(vec![grid, grid], data).expect("grid-sized target")
}

/// `(row, col)` of the cell containing the box center, clamped to the grid.
pub fn center_cell(b: &CenterBox, grid: usize) -> (usize, usize) {
    let g = grid as f64;
    let i = ((b.cy * g).floor().max(0.0) as usize).min(grid - 1);
    let j = ((b.cx * g).floor().max(0.0) as usize).min(grid - 1);
    (i, j)
}

pub(crate) fn giou_loss_with_grad(pred: [f64; 4], gt: [f64; 4]) -> Result<(f64, [f64; 4])> {
    let [_, _, w, h] = pred;
    let [_, _, bw, bh] = gt;
    if !(bw > 0.0 && bh > 0.0) {
        return Err(Error::Input(
            "giou_loss: ground-truth box has zero area".into(),
        ));
    }
    if w < 0.0 || h < 0.0 {
        return Err(Error::Input("giou_loss: negative predicted size".into()));
    }
    let a = CenterBox::from_array(pred).corners();
    let b = CenterBox::from_array(gt).corners();

    let iw_raw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih_raw = a[3].min(b[3]) - a[1].max(b[1]);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    // Corner-difference areas keep giou_loss(a, a) exactly 0.
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let union = area_a + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let c = cw * ch;
    let loss = 2.0 - inter / union - union / c;

    let dl_di = -(union + inter) / (union * union) + 1.0 / c;
    let dl_da = inter / (union * union) - 1.0 / c;
    let dl_dc = union / (c * c);

    // Gradients with respect to the corners x1, y1, x2, y2 of the prediction.
    let mut dcorner = [0.0; 4];
    if iw_raw > 0.0 {
        if a[0] > b[0] {
            dcorner[0] += dl_di * -ih;
        }
        if a[2] < b[2] {
            dcorner[2] += dl_di * ih;
        }
    }
    if ih_raw > 0.0 {
        if a[1] > b[1] {
            dcorner[1] += dl_di * -iw;
        }
        if a[3] < b[3] {
            dcorner[3] += dl_di * iw;
        }
    }
    if a[0] < b[0] {
        dcorner[0] += dl_dc * -ch;
    }
    if a[2] > b[2] {
        dcorner[2] += dl_dc * ch;
    }
    if a[1] < b[1] {
        dcorner[1] += dl_dc * -cw;
    }
    if a[3] > b[3] {
        dcorner[3] += dl_dc * cw;
    }
    let grad = [
        dcorner[0] + dcorner[2],
        dcorner[1] + dcorner[3],
        0.5 * (dcorner[2] - dcorner[0]) + dl_da * h,
        0.5 * (dcorner[3] - dcorner[1]) + dl_da * w,
    ];
    if !loss.is_finite() {
        return Err(Error::NonFinite("giou_loss".into()));
    }
    Ok((loss, grad))
}

/// `1 − GIoU`, in `[0, 2)`.
pub fn giou_loss(pred: &CenterBox, gt: &CenterBox) -> Result<f64> {
    giou_loss_with_grad(pred.to_array(), gt.to_array()).map(|(l, _)| l)
}

/// Mean absolute difference over `(cx, cy, w, h)`.
pub fn l1_loss(pred: &CenterBox, gt: &CenterBox) -> f64 {
    pred.to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_box() -> impl Strategy<Value = CenterBox> {
        (0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0, 0.01f64..1.0)
            .prop_map(|(cx, cy, w, h)| CenterBox::new(cx, cy, w, h))
    }

    #[test]
    fn total_loss_weights() {
        assert_eq!(total_loss(1.0, 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(total_loss(0.0, 1.0, 0.0).unwrap(), 2.0);
        assert_eq!(total_loss(0.0, 0.0, 1.0).unwrap(), 5.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn giou_identical_and_touching() {
        let a = CenterBox::new(0.3, 0.4, 0.2, 0.1);
        assert_eq!(giou_loss(&a, &a).unwrap(), 0.0);
        let left = CenterBox::new(0.5, 0.5, 1.0, 1.0);
        let right = CenterBox::new(1.5, 0.5, 1.0, 1.0);
        assert_eq!(giou_loss(&left, &right).unwrap(), 1.0);
    }

    #[test]
    fn giou_degenerate_gt_is_error() {
        let a = CenterBox::new(0.5, 0.5, 0.2, 0.2);
        let flat = CenterBox::new(0.5, 0.5, 0.0, 0.2);
        assert!(giou_loss(&a, &flat).is_err());
    }

    /// Coordinate-arithmetic oracle written from the corner definition.
    fn giou_oracle(a: &CenterBox, b: &CenterBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = (
            a.cx - a.w / 2.0,
            a.cy - a.h / 2.0,
            a.cx + a.w / 2.0,
            a.cy + a.h / 2.0,
        );
        let (bx1, by1, bx2, by2) = (
            b.cx - b.w / 2.0,
            b.cy - b.h / 2.0,
            b.cx + b.w / 2.0,
            b.cy + b.h / 2.0,
        );
        let inter = (ax2.min(bx2) - ax1.max(bx1)).max(0.0) * (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let union = a.w * a.h + b.w * b.h - inter;
        let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
        1.0 - (inter / union - (hull - union) / hull)
    }

    proptest! {
        #[test]
        fn giou_matches_oracle_and_is_symmetric(a in arb_box(), b in arb_box()) {
            let l = giou_loss(&a, &b).unwrap();
            prop_assert!((l - giou_oracle(&a, &b)).abs() < 1e-12);
            prop_assert!((l - giou_loss(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..2.0).contains(&l));
            prop_assert!(giou_loss(&a, &a).unwrap().abs() < 1e-15);
        }

        #[test]
        fn giou_gradient_matches_central_differences(a in arb_box(), b in arb_box()) {
            let (_, grad) = giou_loss_with_grad(a.to_array(), b.to_array()).unwrap();
            let eps = 1e-7;
            for k in 0..4 {
                let mut p = a.to_array();
                let mut m = a.to_array();
                p[k] += eps;
                m[k] -= eps;
                let fd = (giou_loss_with_grad(p, b.to_array()).unwrap().0
                    - giou_loss_with_grad(m, b.to_array()).unwrap().0) / (2.0 * eps);
                prop_assert!((fd - grad[k]).abs() < 1e-5 * (1.0 + fd.abs()), "k={} fd={} an={}", k, fd, grad[k]);
            }
        }

        #[test]
        fn l1_zero_iff_identical(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(l1_loss(&a, &a), 0.0);
            if a != b {
                prop_assert!(l1_loss(&a, &b) > 0.0);
            }
        }
    }

    fn one_hot(g: usize, cell: usize) -> Tensor {
        let mut t = Tensor::zeros(&[g, g]);
        t.data_mut()[cell] = 1.0;
        t
    }

    #[test]
    fn focal_perfect_prediction_tends_to_zero() {
        let g = 4;
        let gt = one_hot(g, 5);
        let mut last = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-6] {
            let mut p = Tensor::full(&[g, g], eps);
            p.data_mut()[5] = 1.0 - eps;
            let l = focal_loss(&p, &gt).unwrap().value;
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn focal_half_probability_formula() {
        let g = 16;
        let gt = one_hot(g, 0);
        let p = Tensor::full(&[g, g], 0.5);
        let l = focal_loss(&p, &gt).unwrap().value;
        let ln_half = 0.5f64.ln();
        let want = -(0.25 * ln_half) - ((g * g - 1) as f64) * 0.25 * ln_half;
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
    }

    #[test]
    fn focal_peak_gradient_is_negative_and_monotone() {
        let gt = gaussian_target(&CenterBox::new(0.5, 0.5, 0.25, 0.25), 8);
        let base = Tensor::full(&[8, 8], 0.2);
        let peak = 4 * 8 + 4;
        let r = focal_forward_backward(base.data(), gt.data()).unwrap();
        assert!(r.grad[peak] < 0.0);
        let mut prev = f64::INFINITY;
        for k in 1..20 {
            let mut p = base.clone();
            p.data_mut()[peak] = k as f64 / 20.0;
            let l = focal_loss(&p, &gt).unwrap().value;
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn focal_clamps_and_counts() {
        let gt = one_hot(2, 0);
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.3, 0.3]).unwrap();
        let r = focal_loss(&p, &gt).unwrap();
        assert_eq!(r.clamped, 2);
        assert!(r.value.is_finite());
    }

    #[test]
    fn gaussian_target_has_single_peak() {
        let t = gaussian_target(&CenterBox::new(0.52, 0.27, 0.25, 0.3), 16);
        assert_eq!(t.data().iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(t.get2(4, 8), 1.0);
    }
}
