//! Multi-prompt-set inference: the manipulated no-object score, per-query
//! class decisions and panoptic or semantic map assembly.
//!
//! Network outputs are first reduced to per-image [`ImageRecord`]s, which
//! hold everything decisions depend on; every evaluation path goes through
//! them, so re-deciding from stored records reproduces a run exactly.

pub mod merge;
pub mod records;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use merge::{panoptic_merge, semantic_merge, upsample_bilinear, PanopticPrediction, PredSegment};
pub use records::{
    decisions_from_record, predict_record, read_records, write_records, ImageRecord, StepRecord,
};

/// How the other heads' outputs are reduced to one no-object score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoObjReduction {
    /// `δ · Σ_{k≠t} Σ_c σ(s^k_t(q, c))`.
    ProbSum,
    /// `δ · Σ_{k≠t} Σ_c s^k_t(q, c)` compared against probabilities as is.
    LogitSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapRule {
    /// Pixels go to the highest-scoring query claiming them.
    ConfidenceOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub delta: f64,
    /// No-object score used when only one head exists or manipulation is off.
    pub single_head_threshold: f64,
    pub overlap_rule: OverlapRule,
    pub min_segment_pixels: usize,
    /// `false` applies the single-head threshold to every head.
    pub logit_manipulation: bool,
    pub no_obj_reduction: NoObjReduction,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            delta: 0.5,
            single_head_threshold: 0.5,
            overlap_rule: OverlapRule::ConfidenceOrder,
            min_segment_pixels: 0,
            logit_manipulation: true,
            no_obj_reduction: NoObjReduction::ProbSum,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be finite and >= 0, got {}", self.delta)));
        }
        let tau = self.single_head_threshold;
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Config(format!("single_head_threshold must lie in (0, 1), got {tau}")));
        }
        Ok(())
    }
}

/// Class decision of one query; `class_id = None` is the no-object decision.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryDecision {
    pub step: usize,
    pub query: usize,
    pub class_id: Option<u32>,
    /// Winning class probability; the best own probability for no-object.
    pub score: f64,
    /// Mask probabilities at mask resolution, row-major.
    pub mask_probs: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-query sums over the other heads' classes: `(Σ σ(s), Σ s)`.
pub fn other_head_sums<T: Scalar>(blocks: &[Tensor<T>], t: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if t == 0 || blocks.len() < t {
        return Err(Error::Input(format!(
            "{} head blocks given, step {t} needs its own block",
            blocks.len()
        )));
    }
    let n = blocks[t - 1].rows();
    let (mut probs, mut logits) = (vec![0.0; n], vec![0.0; n]);
    for (k, b) in blocks.iter().enumerate() {
        if b.rows() != n {
            return Err(Error::Input(format!(
                "head block {} has {} rows, expected {n}",
                k + 1,
                b.rows()
            )));
        }
        if k + 1 == t {
            continue;
        }
        for q in 0..n {
            for &v in b.row(q) {
                probs[q] += sigmoid(v.as_f64());
                logits[q] += v.as_f64();
            }
        }
    }
    Ok((probs, logits))
}

/// No-object score of one query from the other heads' sums.
pub fn no_obj_score(heads: usize, prob_sum: f64, logit_sum: f64, cfg: &InferenceConfig) -> f64 {
    if heads <= 1 || !cfg.logit_manipulation {
        return cfg.single_head_threshold;
    }
    cfg.delta
        * match cfg.no_obj_reduction {
            NoObjReduction::ProbSum => prob_sum,
            NoObjReduction::LogitSum => logit_sum,
        }
}

/// `(no_obj_scores, own_probs)` of prompt set `t` from the logit blocks of
/// every existing head applied to its decoder embeddings.
pub fn manipulate_logits<T: Scalar>(
    blocks: &[Tensor<T>],
    t: usize,
    cfg: &InferenceConfig,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (probs, logits) = other_head_sums(blocks, t)?;
    let own = &blocks[t - 1];
    let own_probs = (0..own.rows())
        .map(|q| own.row(q).iter().map(|v| sigmoid(v.as_f64())).collect())
        .collect();
    let no_obj = probs
        .iter()
        .zip(&logits)
        .map(|(p, l)| no_obj_score(blocks.len(), *p, *l, cfg))
        .collect();
    Ok((no_obj, own_probs))
}

/// Local class index per query, or `None` when the no-object score reaches
/// the best own probability (ties go to no-object). Among equal own
/// probabilities the lowest index wins.
pub fn decide(own_probs: &[Vec<f64>], no_obj: &[f64]) -> Result<Vec<Option<usize>>> {
    if own_probs.len() != no_obj.len() {
        return Err(Error::Input(format!(
            "{} probability rows but {} no-object scores",
            own_probs.len(),
            no_obj.len()
        )));
    }
    Ok(own_probs
        .iter()
        .zip(no_obj)
        .map(|(row, &z)| {
            let mut best: Option<(usize, f64)> = None;
            for (c, &p) in row.iter().enumerate() {
                if best.is_none_or(|(_, b)| p > b) {
                    best = Some((c, p));
                }
            }
            best.filter(|&(_, p)| p > z).map(|(c, _)| c)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], vec![v; rows * cols]).unwrap()
    }

    #[test]
    fn single_head_uses_threshold() {
        let cfg = InferenceConfig::default();
        let (z, own) = manipulate_logits(&[t2(3, 2, 1.0)], 1, &cfg).unwrap();
        assert_eq!(z, vec![0.5; 3]);
        assert_eq!(own[0].len(), 2);
    }

    #[test]
    fn closed_form_other_head_sum() {
        // other head logits all zero, four classes, delta 0.5: 0.5 · 4 · σ(0)
        let cfg = InferenceConfig::default();
        let (z, _) = manipulate_logits(&[t2(2, 4, 0.0), t2(2, 3, 2.0)], 2, &cfg).unwrap();
        assert_eq!(z, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_delta_never_suppresses() {
        let cfg = InferenceConfig {
            delta: 0.0,
            ..Default::default()
        };
        let (z, own) = manipulate_logits(&[t2(2, 4, 5.0), t2(2, 3, -30.0)], 2, &cfg).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        assert!(decide(&own, &z).unwrap().iter().all(Option::is_some));
    }

    #[test]
    fn missing_or_misshaped_blocks_are_input_errors() {
        let cfg = InferenceConfig::default();
        assert!(matches!(
            manipulate_logits(&[t2(2, 4, 0.0)], 2, &cfg),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            manipulate_logits(&[t2(2, 4, 0.0), t2(3, 4, 0.0)], 2, &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn decision_examples() {
        let d = decide(&[vec![0.9, 0.1], vec![0.4, 0.2]], &[0.3, 0.4]).unwrap();
        assert_eq!(d, vec![Some(0), None]);
    }

    #[test]
    fn logit_sum_reduction() {
        let cfg = InferenceConfig {
            no_obj_reduction: NoObjReduction::LogitSum,
            ..Default::default()
        };
        let (z, _) = manipulate_logits(&[t2(1, 4, -1.0), t2(1, 2, 0.0)], 2, &cfg).unwrap();
        assert_eq!(z, vec![-2.0]);
        let off = InferenceConfig {
            logit_manipulation: false,
            ..Default::default()
        };
        let (z, _) = manipulate_logits(&[t2(1, 4, -1.0), t2(1, 2, 0.0)], 2, &off).unwrap();
        assert_eq!(z, vec![0.5]);
    }

    #[test]
    fn config_validation() {
        assert!(InferenceConfig::default().validate().is_ok());
        for bad in [
            InferenceConfig {
                delta: -0.1,
                ..Default::default()
            },
            InferenceConfig {
                single_head_threshold: 1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
