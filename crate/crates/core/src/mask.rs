//! Soft/binary mask algebra: Dice loss, IoU, binarisation, background
//! complement. All masks are rows of values in `[0, 1]`; a stack of rows is a
//! [`MaskSet`]. These are pure functions, safe to evaluate across rows in
//! parallel.

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Smoothing term of the squared-denominator soft Dice loss.
pub const DICE_EPS: f64 = 1e-6;

/// Threshold at which soft predictions are binarised before IoU.
pub const BIN_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Soft,
    Binary,
}

/// `R x N` stack of masks over one scene's points.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    values: Mat,
    kind: MaskKind,
}

impl MaskSet {
    pub fn new(values: Mat, kind: MaskKind) -> Result<Self> {
        for v in values.data() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::invalid(format!("mask entry {v} outside [0, 1]")));
            }
            if kind == MaskKind::Binary && *v != 0.0 && *v != 1.0 {
                return Err(Error::invalid(format!("binary mask entry {v} not in {{0, 1}}")));
            }
        }
        Ok(MaskSet { values, kind })
    }

    pub fn soft(values: Mat) -> Result<Self> {
        MaskSet::new(values, MaskKind::Soft)
    }

    pub fn binary(values: Mat) -> Result<Self> {
        MaskSet::new(values, MaskKind::Binary)
    }

    /// Empty set of masks over `n_points` points.
    pub fn empty(n_points: usize) -> Self {
        MaskSet { values: Mat::zeros(0, n_points), kind: MaskKind::Binary }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn n_points(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.values.row(r)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.iter_rows()
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "mask length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Squared-denominator soft Dice loss with explicit smoothing:
/// `1 - (2 Σ a_i b_i + eps) / (Σ a_i^2 + Σ b_i^2 + eps)`.
pub fn dice_loss_eps(a: &[f64], b: &[f64], eps: f64) -> Result<f64> {
    check_same_len(a, b)?;
    let mut inter = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        inter += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = na + nb + eps;
    if denom == 0.0 {
        // eps = 0 and both masks all-zero: identical masks, zero loss.
        return Ok(0.0);
    }
    Ok(1.0 - (2.0 * inter + eps) / denom)
}

/// Dice loss with the project-wide smoothing term.
pub fn dice_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    dice_loss_eps(a, b, DICE_EPS)
}

/// Dice loss on complemented masks, the background row of the cost matrix:
/// `dice(1 - target, 1 - pred)`.
pub fn background_cost(target: &[f64], pred: &[f64]) -> Result<f64> {
    background_cost_eps(target, pred, DICE_EPS)
}

pub fn background_cost_eps(target: &[f64], pred: &[f64], eps: f64) -> Result<f64> {
    check_same_len(target, pred)?;
    let ct: Vec<f64> = target.iter().map(|v| 1.0 - v).collect();
    let cp: Vec<f64> = pred.iter().map(|v| 1.0 - v).collect();
    dice_loss_eps(&ct, &cp, eps)
}

/// Dice loss plus its gradient with respect to the prediction `p`.
pub fn dice_loss_grad(target: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_same_len(target, p)?;
    let mut inter = 0.0;
    let mut nt = 0.0;
    let mut np = 0.0;
    for (t, q) in target.iter().zip(p) {
        inter += t * q;
        nt += t * t;
        np += q * q;
    }
    let a = 2.0 * inter + DICE_EPS;
    let b = nt + np + DICE_EPS;
    let loss = 1.0 - a / b;
    let grad = target
        .iter()
        .zip(p)
        .map(|(t, q)| -(2.0 * t * b - a * 2.0 * q) / (b * b))
        .collect();
    Ok((loss, grad))
}

/// Complemented-mask Dice (the background training form) plus its gradient
/// with respect to `p`: `dice(1 - target, 1 - p)`.
pub fn background_cost_grad(target: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>)> {
    let ct: Vec<f64> = target.iter().map(|v| 1.0 - v).collect();
    let cp: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
    let (loss, mut grad) = dice_loss_grad(&ct, &cp)?;
    for g in grad.iter_mut() {
        *g = -*g;
    }
    Ok((loss, grad))
}

/// Intersection-over-union. `a` must be binary; a soft `b` is binarised at
/// [`BIN_THRESHOLD`] first. An empty union yields 0.
pub fn iou(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same_len(a, b)?;
    debug_assert!(a.iter().all(|v| *v == 0.0 || *v == 1.0), "iou: a must be binary");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b) {
        let xa = *x == 1.0;
        let yb = *y >= BIN_THRESHOLD;
        if xa && yb {
            inter += 1;
        }
        if xa || yb {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Thresholds every entry (`1` iff `value >= threshold`); the result is Binary.
pub fn binarize(m: &MaskSet, threshold: f64) -> MaskSet {
    let mut values = m.values().clone();
    for v in values.data_mut() {
        *v = if *v >= threshold { 1.0 } else { 0.0 };
    }
    MaskSet { values, kind: MaskKind::Binary }
}

/// Binarises one mask row at [`BIN_THRESHOLD`].
pub fn binarize_row(row: &[f64]) -> Vec<f64> {
    row.iter().map(|v| if *v >= BIN_THRESHOLD { 1.0 } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dice_identical_nonzero_binary_is_zero() {
        let a = [1.0, 0.0, 1.0, 1.0];
        assert_eq!(dice_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn dice_disjoint_is_near_one() {
        let a = [1.0, 1.0, 0.0, 0.0];
        let b = [0.0, 0.0, 1.0, 0.0];
        let expected = 1.0 - DICE_EPS / (2.0 + 1.0 + DICE_EPS);
        assert!((dice_loss(&a, &b).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn dice_hand_case_third() {
        // 1 - 2*1/(2+1) = 1/3 at eps = 0.
        let a = [1.0, 1.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0, 0.0];
        let got = dice_loss_eps(&a, &b, 0.0).unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dice_length_mismatch_errors() {
        assert!(dice_loss(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn background_cost_perfect_background() {
        let target = [0.0, 0.0, 0.0, 0.0];
        let pred = [0.0, 0.0, 0.0, 0.0];
        assert_eq!(background_cost_eps(&target, &pred, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn background_cost_total_miss() {
        let target = [0.0, 0.0, 0.0, 0.0];
        let pred = [1.0, 1.0, 1.0, 1.0];
        assert_eq!(background_cost_eps(&target, &pred, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn background_cost_half_pred() {
        // dice(1, 0.5) over N=4: 1 - (2*2)/(4+1) = 0.2.
        let target = [0.0; 4];
        let pred = [0.5; 4];
        let got = background_cost_eps(&target, &pred, 0.0).unwrap();
        assert!((got - 0.2).abs() < 1e-15);
    }

    #[test]
    fn iou_cases() {
        let a = [1.0, 1.0, 1.0, 0.0];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let disjoint = [0.0, 0.0, 0.0, 1.0];
        assert_eq!(iou(&a, &disjoint).unwrap(), 0.0);
        let b = [0.0, 1.0, 1.0, 1.0];
        assert_eq!(iou(&a, &b).unwrap(), 0.5);
        let empty = [0.0; 4];
        assert_eq!(iou(&empty, &empty).unwrap(), 0.0);
    }

    #[test]
    fn iou_binarizes_soft_b() {
        let a = [1.0, 1.0, 0.0, 0.0];
        let b = [0.9, 0.49, 0.5, 0.1]; // binarises to [1, 0, 1, 0]
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn binarize_boundary_inclusive() {
        let m = MaskSet::soft(Mat::from_rows(&[vec![0.49, 0.5, 0.51]])).unwrap();
        let b = binarize(&m, 0.5);
        assert_eq!(b.row(0), &[0.0, 1.0, 1.0]);
        assert_eq!(b.kind(), MaskKind::Binary);
    }

    #[test]
    fn maskset_rejects_out_of_range() {
        assert!(MaskSet::soft(Mat::from_rows(&[vec![1.2]])).is_err());
        assert!(MaskSet::binary(Mat::from_rows(&[vec![0.5]])).is_err());
    }

    #[test]
    fn dice_grad_matches_finite_differences() {
        let target = [1.0, 0.0, 1.0, 0.0, 1.0];
        let p = [0.8, 0.3, 0.4, 0.1, 0.9];
        for (f, name) in [
            (dice_loss_grad as fn(&[f64], &[f64]) -> Result<(f64, Vec<f64>)>, "dice"),
            (background_cost_grad, "background"),
        ] {
            let (_, grad) = f(&target, &p).unwrap();
            for i in 0..p.len() {
                let h = 1e-6;
                let mut hi = p;
                hi[i] += h;
                let mut lo = p;
                lo[i] -= h;
                let fd = (f(&target, &hi).unwrap().0 - f(&target, &lo).unwrap().0) / (2.0 * h);
                assert!(
                    (grad[i] - fd).abs() <= 1e-6 * grad[i].abs().max(fd.abs()).max(1.0),
                    "{name}: grad[{i}] = {} vs fd {}",
                    grad[i],
                    fd
                );
            }
        }
    }

    proptest! {
        #[test]
        fn dice_bounded_and_symmetric(
            a in proptest::collection::vec(0.0f64..=1.0, 1..40),
            b in proptest::collection::vec(0.0f64..=1.0, 1..40),
        ) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            let d = dice_loss(a, b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            let d2 = dice_loss(b, a).unwrap();
            prop_assert!((d - d2).abs() < 1e-12);
        }

        #[test]
        fn dice_zero_iff_equal_binary(
            a in proptest::collection::vec(0..=1u8, 1..30),
            b in proptest::collection::vec(0..=1u8, 1..30),
        ) {
            let n = a.len().min(b.len());
            let af: Vec<f64> = a[..n].iter().map(|v| *v as f64).collect();
            let bf: Vec<f64> = b[..n].iter().map(|v| *v as f64).collect();
            let d = dice_loss_eps(&af, &bf, 0.0).unwrap();
            prop_assert_eq!(d == 0.0, af == bf);
        }

        #[test]
        fn binarize_idempotent(vals in proptest::collection::vec(0.0f64..=1.0, 1..50)) {
            let m = MaskSet::soft(Mat::from_rows(&[vals])).unwrap();
            let once = binarize(&m, 0.5);
            let twice = binarize(&once, 0.5);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn iou_sum_over_disjoint_targets_below_one(
            labels in proptest::collection::vec(0..4u8, 8..60),
            pred in proptest::collection::vec(0..=1u8, 8..60),
        ) {
            let n = labels.len().min(pred.len());
            // Three disjoint targets from a label partition (label 3 = none).
            let targets: Vec<Vec<f64>> = (0..3)
                .map(|t| labels[..n].iter().map(|l| if *l == t { 1.0 } else { 0.0 }).collect())
                .collect();
            let m: Vec<f64> = pred[..n].iter().map(|v| *v as f64).collect();
            let total: f64 = targets.iter().map(|t| iou(&m, t).unwrap()).sum();
            prop_assert!(total <= 1.0 + 1e-12);
        }
    }
}
