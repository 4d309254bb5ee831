//! Central finite-difference check of the analytic training gradient.

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::net::{build_encoder, build_memory_kv, build_step};
use crate::model::ModelState;
use crate::tensor::Tensor;
use crate::training::losses::segmentation_loss;
use crate::training::matching::{Assignment, MatchWeights, Target};
use crate::training::train::assign;

/// Denominator floor of the relative error. Central differences of an
/// `O(10)` loss carry roundoff near `1e-16 · 10 / ε`, so gradients below the
/// floor are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |a − n| / max(|a|, |n|, floor)` over trainable scalars.
    pub max_rel_error: f64,
    /// Trainable scalars compared.
    pub checked: usize,
    /// Largest analytic gradient magnitude seen on a frozen parameter; the
    /// tape records frozen parameters as constants, so this is 0.
    pub frozen_max_abs: f64,
    /// `(parameter, index, analytic, numeric)` at the largest error.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn loss_value(
    state: &ModelState<f64>,
    image: &Tensor<f64>,
    targets: &[Target],
    t: usize,
    assignment: &Assignment,
    weights: &MatchWeights,
    grad: bool,
) -> Result<(f64, Vec<(usize, Vec<f64>)>)> {
    let mut g = if grad { Graph::new() } else { Graph::inference() };
    let enc = build_encoder(&mut g, state, image)?;
    let kv = build_memory_kv(&mut g, state, &enc);
    let v = build_step(&mut g, state, &enc, &kv, t)?;
    let l = segmentation_loss(&mut g, v.class_logits, v.mask_logits, targets, assignment, weights);
    let value = g.value(l.total).data()[0];
    if !grad {
        return Ok((value, vec![]));
    }
    let grads = g.backward(l.total);
    let all = (0..state.params().len())
        .map(|id| {
            let n = state.params()[id].value.len();
            (id, grads.param(id).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
        })
        .collect();
    Ok((value, all))
}

/// Compares the analytic gradient of the step-`t` training loss against
/// central differences with step `epsilon`, for every trainable scalar.
/// The assignment is computed once at the unperturbed parameters.
pub fn grad_check(
    state: &ModelState<f64>,
    image: &Tensor<f64>,
    targets: &[Target],
    t: usize,
    epsilon: f64,
    weights: &MatchWeights,
) -> Result<GradCheck> {
    if !(epsilon > 0.0) {
        return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
    }
    let assignment = {
        let mut g = Graph::inference();
        let enc = build_encoder(&mut g, state, image)?;
        let kv = build_memory_kv(&mut g, state, &enc);
        let v = build_step(&mut g, state, &enc, &kv, t)?;
        assign(&g, v.class_logits, v.mask_logits, targets, weights)?
    };
    let (_, analytic) = loss_value(state, image, targets, t, &assignment, weights, true)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        frozen_max_abs: 0.0,
        worst: None,
    };
    let mut work = state.clone();
    for (id, grad) in &analytic {
        if !state.is_trainable(*id) {
            let m = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            report.frozen_max_abs = report.frozen_max_abs.max(m);
            continue;
        }
        for j in 0..grad.len() {
            let orig = state.params()[*id].value.data()[j];
            let mut eval = |delta: f64| -> Result<f64> {
                set_scalar(&mut work, *id, j, orig + delta);
                Ok(loss_value(&work, image, targets, t, &assignment, weights, false)?.0)
            };
            let plus = eval(epsilon)?;
            let minus = eval(-epsilon)?;
            set_scalar(&mut work, *id, j, orig);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((state.params()[*id].name.clone(), j, a, numeric));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn set_scalar(state: &mut ModelState<f64>, id: usize, j: usize, v: f64) {
    for (pid, value) in state.trainable_mut() {
        if pid == id {
            value.data_mut()[j] = v;
            return;
        }
    }
    unreachable!("parameter {id} is not trainable");
}
