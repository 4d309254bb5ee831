//! Mask and classification losses, both as plain functions over values and
//! as tape nodes for training.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::training::matching::{Assignment, MatchWeights, Target};

/// Smoothing constant of the dice loss.
pub const DICE_EPS: f64 = 1.0;

pub(crate) fn dice_loss_slice<T: Scalar>(p: &[T], g: &[T], eps: T) -> T {
    let inter: T = p.iter().zip(g).map(|(a, b)| *a * *b).sum();
    let sp: T = p.iter().copied().sum();
    let sg: T = g.iter().copied().sum();
    T::one() - (T::lit(2.0) * inter + eps) / (sp + sg + eps)
}

/// `1 − (2Σpg + ε) / (Σp + Σg + ε)` with `ε = 1`.
pub fn dice_loss<T: Scalar>(pred_probs: &[T], target: &[T]) -> Result<T> {
    if pred_probs.len() != target.len() {
        return Err(Error::Input(format!(
            "dice operands differ in size: {} vs {}",
            pred_probs.len(),
            target.len()
        )));
    }
    Ok(dice_loss_slice(pred_probs, target, T::lit(DICE_EPS)))
}

/// Binary cross-entropy of one probability against a (soft) target, with
/// the `0 · ln 0 = 0` convention.
pub fn bce<T: Scalar>(p: T, y: T) -> T {
    let tiny = T::lit(1e-12);
    let mut out = T::zero();
    if y > T::zero() {
        out -= y * p.max(tiny).ln();
    }
    if y < T::one() {
        out -= (T::one() - y) * (T::one() - p).max(tiny).ln();
    }
    out
}

/// Mean per-pixel BCE between mask probabilities and a target mask.
pub fn bce_mask_loss<T: Scalar>(pred_probs: &[T], target: &[T]) -> Result<T> {
    if pred_probs.len() != target.len() || target.is_empty() {
        return Err(Error::Input(format!(
            "mask BCE operands differ in size: {} vs {}",
            pred_probs.len(),
            target.len()
        )));
    }
    let sum: T = pred_probs.iter().zip(target).map(|(p, y)| bce(*p, *y)).sum();
    Ok(sum / T::lit(target.len() as f64))
}

/// BCE from a logit, numerically stable.
pub fn bce_with_logit<T: Scalar>(x: T, y: T) -> T {
    x.softplus() - x * y
}

/// Per-query sigmoid classification targets: matched queries get the
/// one-hot vector of their target's class, the rest all zeros.
pub fn class_targets<T: Scalar>(
    queries: usize,
    classes: usize,
    assignment: &Assignment,
    targets: &[Target],
) -> Vec<T> {
    let mut y = vec![T::zero(); queries * classes];
    for &(q, j) in &assignment.pairs {
        y[q * classes + targets[j].class] = T::one();
    }
    y
}

/// Classification loss `(1/N) Σ_q Σ_c BCE(σ(s_qc), y_qc)` over `logits [N, C]`.
pub fn bce_cls_loss<T: Scalar>(
    logits: &[T],
    queries: usize,
    classes: usize,
    assignment: &Assignment,
    targets: &[Target],
) -> Result<T> {
    if logits.len() != queries * classes {
        return Err(Error::Input(format!(
            "class logits have {} values, expected {queries}x{classes}",
            logits.len()
        )));
    }
    let y = class_targets::<T>(queries, classes, assignment, targets);
    let sum: T = logits.iter().zip(&y).map(|(x, t)| bce_with_logit(*x, *t)).sum();
    Ok(sum / T::lit(queries.max(1) as f64))
}

/// Scalar loss nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub cls: Var,
    pub mask_bce: Option<Var>,
    pub dice: Option<Var>,
}

/// Builds the weighted training loss for `class_logits [N, C]` and
/// `mask_logits [N, P]` given an assignment to `targets`.
pub fn segmentation_loss<T: Scalar>(
    g: &mut Graph<T>,
    class_logits: Var,
    mask_logits: Var,
    targets: &[Target],
    assignment: &Assignment,
    weights: &MatchWeights,
) -> LossNodes {
    let (n, c) = {
        let v = g.value(class_logits);
        (v.rows(), v.cols())
    };
    let y = class_targets::<T>(n, c, assignment, targets);
    let cls = g.sigmoid_bce(class_logits, y, T::one() / T::lit(n.max(1) as f64));
    let mut terms = vec![(cls, T::lit(weights.w_cls))];
    let (mut mask_bce, mut dice) = (None, None);
    if !assignment.pairs.is_empty() {
        let p = g.value(mask_logits).cols();
        let rows: Vec<usize> = assignment.pairs.iter().map(|&(q, _)| q).collect();
        let mut masks = Vec::with_capacity(rows.len() * p);
        for &(_, j) in &assignment.pairs {
            masks.extend(targets[j].mask.iter().map(|&v| T::lit(v)));
        }
        let picked = g.gather_rows(mask_logits, &rows);
        let scale = T::one() / T::lit((rows.len() * p) as f64);
        let b = g.sigmoid_bce(picked, masks.clone(), scale);
        let d = g.dice_rows(picked, masks, T::lit(DICE_EPS));
        terms.push((b, T::lit(weights.w_bce)));
        terms.push((d, T::lit(weights.w_dice)));
        mask_bce = Some(b);
        dice = Some(d);
    }
    let total = g.weighted_sum(&terms);
    LossNodes {
        total,
        cls,
        mask_bce,
        dice,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_closed_form() {
        // identical binary masks: the smoothing term cancels, well inside 1/(2Σp+1)
        let p = vec![1.0f64; 100];
        let d = dice_loss(&p, &p).unwrap();
        assert!(d.abs() < 1e-15 && d <= 1.0 / 201.0);
        // disjoint masks: 1 − 1/(Σp + 1)
        let z = vec![0.0f64; 100];
        assert!((dice_loss(&p, &z).unwrap() - 100.0 / 101.0).abs() < 1e-15);
        // half overlap, Σp = Σg = 2, Σpg = 1: 1 − 3/5
        let a = [1.0f64, 1.0, 0.0];
        let b = [0.0f64, 1.0, 1.0];
        assert!((dice_loss(&a, &b).unwrap() - 0.4).abs() < 1e-15);
        let small = vec![1.0f64; 3];
        assert!(dice_loss(&p, &small).is_err());
    }

    #[test]
    fn unmatched_zero_logits_cost_ln2_per_class() {
        let a = Assignment {
            pairs: vec![],
            unmatched_queries: vec![0],
        };
        let l = bce_cls_loss(&[0.0f64; 4], 1, 4, &a, &[]).unwrap();
        assert!((l - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_with_logit(0.0f64, 0.0) - (-(0.5f64).ln())).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_logits_cost_nothing() {
        let a = Assignment {
            pairs: vec![(0, 0)],
            unmatched_queries: vec![],
        };
        let t = Target {
            class: 1,
            mask: vec![1.0],
        };
        let l = bce_cls_loss(&[-40.0f64, 40.0, -40.0], 1, 3, &a, &[t]).unwrap();
        assert!(l < 1e-15);
    }

    #[test]
    fn losses_are_non_negative() {
        let p = [0.2f64, 0.9, 0.5];
        let g = [0.0f64, 1.0, 0.3];
        assert!(bce_mask_loss(&p, &g).unwrap() >= 0.0);
        assert!(dice_loss(&p, &g).unwrap() >= 0.0);
        assert_eq!(bce(1.0f64, 1.0), 0.0);
        assert_eq!(bce(0.0f64, 0.0), 0.0);
    }
}
