//! Per-step optimization: batch assembly, matching, loss, AdamW updates and
//! the freeze contract.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::cache::sha256_hex;
use crate::data::PanopticSample;
use crate::error::{Error, Result};
use crate::model::net::{
    build_encoder, build_head, build_memory_kv, build_step, encoding_inputs, EncodedVars,
};
use crate::model::{encode, image_tensor, Encoding, ModelState, ParamGroup};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::losses::{segmentation_loss, LossNodes};
use crate::training::matching::{hungarian, match_cost, Assignment, MatchWeights, Target};
use crate::training::optim::{poly_lr, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub iters_per_class: usize,
    /// Multiplies `iters_per_class · |C^t|`; 0 disables training.
    pub iter_scale: f64,
    pub lr_first: f64,
    pub lr_later: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub lr_power: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            iters_per_class: 1600,
            iter_scale: 0.1,
            lr_first: 1e-3,
            lr_later: 5e-3,
            batch_size: 4,
            weight_decay: 0.05,
            clip_norm: 1.0,
            lr_power: 0.9,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.iters_per_class > 0
            && self.iter_scale >= 0.0
            && self.iter_scale.is_finite()
            && self.lr_first > 0.0
            && self.lr_later > 0.0
            && self.batch_size > 0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0
            && self.lr_power >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid training hyper-parameters: {self:?}")));
        }
        Ok(())
    }

    /// Iterations of a step with `classes` classes.
    pub fn iterations(&self, classes: usize) -> usize {
        (self.iters_per_class as f64 * classes as f64 * self.iter_scale).round() as usize
    }

    pub fn lr(&self, t: usize) -> f64 {
        if t == 1 {
            self.lr_first
        } else {
            self.lr_later
        }
    }
}

/// Which prompt sets and heads a training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Prompt set `t` with head `t` only.
    Eclipse,
    /// Every prompt set `1..=t`, each classified by all heads jointly.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub cls: f64,
    pub mask_bce: f64,
    pub dice: f64,
    pub grad_norm: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,iteration,lr,total,cls,mask_bce,dice,grad_norm";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step,
            self.iteration,
            self.lr,
            self.total,
            self.cls,
            self.mask_bce,
            self.dice,
            self.grad_norm
        )
    }
}

/// Appends records to a CSV log, writing the header for a new file.
pub fn append_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(LOSS_LOG_HEADER);
        text.push('\n');
    }
    for r in records {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub iterations: usize,
    pub log: Vec<LossRecord>,
}

/// Soft mask targets at mask resolution: each segment's pixel fraction per
/// cell, for segments whose class is in `classes`. Class indices are
/// positions in `classes` plus `offset`.
pub fn mask_targets(
    sample: &PanopticSample,
    mask_resolution: [usize; 2],
    classes: &[u32],
    offset: usize,
) -> Result<Vec<Target>> {
    let [h, w] = mask_resolution;
    if h == 0 || w == 0 || !sample.height.is_multiple_of(h) || !sample.width.is_multiple_of(w) {
        return Err(Error::Input(format!(
            "image {}x{} is not a multiple of mask resolution {h}x{w}",
            sample.height, sample.width
        )));
    }
    let (fy, fx) = (sample.height / h, sample.width / w);
    let cell = (fy * fx) as f64;
    let mut out = Vec::new();
    for seg in &sample.segments {
        let Some(local) = classes.iter().position(|&c| c == seg.class_id) else {
            continue;
        };
        let mut mask = vec![0.0; h * w];
        for y in 0..sample.height {
            for x in 0..sample.width {
                if sample.segment_map[y * sample.width + x] == seg.id {
                    mask[(y / fy) * w + x / fx] += 1.0 / cell;
                }
            }
        }
        out.push(Target {
            class: local + offset,
            mask,
        });
    }
    Ok(out)
}

/// Hash of every frozen tensor's bytes, in registry order.
fn frozen_digest<T: Scalar>(state: &ModelState<T>) -> String {
    let mut bytes = Vec::new();
    for (i, p) in state.params().iter().enumerate() {
        if !state.is_trainable(i) {
            for v in p.value.data() {
                v.write_le(&mut bytes);
            }
        }
    }
    sha256_hex(&bytes)
}

struct Prepared<T> {
    image: Tensor<T>,
    encoding: Option<Encoding<T>>,
    targets: Vec<Target>,
}

/// Class list of the objective's classifier: `C^t`, or `C^1 … C^t` joined.
fn objective_classes<T: Scalar>(state: &ModelState<T>, t: usize, objective: Objective) -> Vec<u32> {
    match objective {
        Objective::Eclipse => state.prompt_sets[t - 1].local_classes.clone(),
        Objective::Finetune => state.prompt_sets[..t]
            .iter()
            .flat_map(|s| s.local_classes.iter().copied())
            .collect(),
    }
}

/// Builds `(class_logits, mask_logits)` of the objective for one image.
fn build_objective<T: Scalar>(
    g: &mut Graph<T>,
    state: &ModelState<T>,
    prepared: &Prepared<T>,
    t: usize,
    objective: Objective,
) -> Result<(Var, Var)> {
    let enc: EncodedVars = match &prepared.encoding {
        Some(e) => encoding_inputs(g, e),
        None => build_encoder(g, state, &prepared.image)?,
    };
    let kv = build_memory_kv(g, state, &enc);
    match objective {
        Objective::Eclipse => {
            let v = build_step(g, state, &enc, &kv, t)?;
            Ok((v.class_logits, v.mask_logits))
        }
        Objective::Finetune => {
            let mut classes = Vec::with_capacity(t);
            let mut masks = Vec::with_capacity(t);
            for k in 1..=t {
                let v = build_step(g, state, &enc, &kv, k)?;
                let mut blocks = vec![];
                for j in 1..=t {
                    blocks.push(if j == k {
                        v.class_logits
                    } else {
                        build_head(g, state, v.embeddings, j)?
                    });
                }
                classes.push(g.concat_cols(&blocks));
                masks.push(v.mask_logits);
            }
            Ok((g.concat_rows(&classes), g.concat_rows(&masks)))
        }
    }
}

/// Hungarian assignment of the current predictions to `targets`.
pub fn assign<T: Scalar>(
    g: &Graph<T>,
    class_logits: Var,
    mask_logits: Var,
    targets: &[Target],
    weights: &MatchWeights,
) -> Result<Assignment> {
    let cls: Vec<f64> = g.value(class_logits).data().iter().map(|v| v.as_f64()).collect();
    let msk: Vec<f64> = g.value(mask_logits).data().iter().map(|v| v.as_f64()).collect();
    let n = g.value(class_logits).rows();
    Ok(hungarian(&match_cost(&cls, &msk, n, targets, weights)?))
}

/// Trains step `t` of `state` on `step_data` (a step view). Only parameters
/// whose group is unfrozen change; frozen tensors are verified bitwise
/// unchanged afterwards.
pub fn train_task<T: Scalar>(
    state: &mut ModelState<T>,
    step_data: &[PanopticSample],
    t: usize,
    hyper: &TrainHyper,
    weights: &MatchWeights,
    objective: Objective,
) -> Result<TrainReport> {
    hyper.validate()?;
    weights.validate()?;
    if t != state.current_step() {
        return Err(Error::State(format!(
            "training step {t} but the model is at step {}",
            state.current_step()
        )));
    }
    if step_data.is_empty() {
        return Err(Error::Protocol(format!("step {t} has no training images")));
    }
    let total = hyper.iterations(state.prompt_sets[t - 1].local_classes.len());
    if total == 0 {
        return Ok(TrainReport::default());
    }
    let frozen_before = frozen_digest(state);
    let classes = objective_classes(state, t, objective);
    let encoder_frozen =
        state.is_frozen(ParamGroup::Backbone) && state.is_frozen(ParamGroup::PixelDecoder);
    let mut data = Vec::with_capacity(step_data.len());
    for s in step_data {
        let image = image_tensor::<T>(s);
        let encoding = if encoder_frozen {
            Some(encode(state, &image)?)
        } else {
            None
        };
        data.push(Prepared {
            image,
            encoding,
            targets: mask_targets(s, state.config.mask_resolution, &classes, 0)?,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(t as u64);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: hyper.weight_decay,
        clip_norm: hyper.clip_norm,
        ..Default::default()
    });
    let base_lr = hyper.lr(t);
    let inv_b = T::one() / T::lit(hyper.batch_size as f64);
    let mut report = TrainReport {
        iterations: total,
        log: Vec::with_capacity(total),
    };
    for it in 0..total {
        let mut g = Graph::new();
        let mut terms = Vec::with_capacity(hyper.batch_size);
        let mut parts: Vec<LossNodes> = Vec::with_capacity(hyper.batch_size);
        for _ in 0..hyper.batch_size {
            let item = &data[rng.random_range(0..data.len())];
            let (cls, msk) = build_objective(&mut g, state, item, t, objective)?;
            let a = assign(&g, cls, msk, &item.targets, weights)?;
            let l = segmentation_loss(&mut g, cls, msk, &item.targets, &a, weights);
            terms.push((l.total, inv_b));
            parts.push(l);
        }
        let loss = g.weighted_sum(&terms);
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {t}, iteration {it}"
            )));
        }
        let grads = g.backward(loss);
        let mut trainable = state.trainable_mut();
        let grad_list: Vec<(usize, Vec<T>)> = trainable
            .iter()
            .filter_map(|(id, _)| grads.param(*id).map(|gr| (*id, gr.to_vec())))
            .collect();
        let lr = poly_lr(base_lr, it, total, hyper.lr_power);
        let grad_norm = opt.step(&mut trainable, &grad_list, lr);
        let mean = |f: &dyn Fn(&LossNodes) -> Option<Var>| {
            parts
                .iter()
                .filter_map(|p| f(p).map(|v| g.value(v).data()[0].as_f64()))
                .sum::<f64>()
                / parts.len() as f64
        };
        report.log.push(LossRecord {
            step: t,
            iteration: it,
            lr,
            total: value,
            cls: mean(&|p| Some(p.cls)),
            mask_bce: mean(&|p| p.mask_bce),
            dice: mean(&|p| p.dice),
            grad_norm,
        });
    }
    if frozen_digest(state) != frozen_before {
        return Err(Error::State(format!(
            "frozen parameters changed while training step {t}"
        )));
    }
    Ok(report)
}
