//! Per-image query records: the network outputs every class decision depends
//! on, stored so decisions can be recomputed for any inference setting.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{decide, no_obj_score, other_head_sums, sigmoid, InferenceConfig, QueryDecision};
use crate::error::{Error, Result};
use crate::model::{apply_heads, forward_all, image_tensor, ModelState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::data::PanopticSample;

/// Outputs of one prompt set on one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: usize,
    /// Global ids of the classes scored by `own_logits`.
    pub classes: Vec<u32>,
    /// `[N][classes]` pre-activation class scores.
    pub own_logits: Vec<Vec<f64>>,
    /// Per query, `Σ σ(s)` over every other head's classes.
    pub other_prob_sum: Vec<f64>,
    /// Per query, `Σ s` over every other head's classes.
    pub other_logit_sum: Vec<f64>,
    /// `[N, h, w]` row-major pre-activation mask scores.
    pub mask_logits: Vec<f32>,
}

impl StepRecord {
    pub fn num_queries(&self) -> usize {
        self.own_logits.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image: usize,
    pub height: usize,
    pub width: usize,
    pub mask_resolution: [usize; 2],
    /// Heads existing when the record was taken.
    pub heads: usize,
    /// Each prompt set scored jointly by all heads; no-object is then the
    /// single-head threshold.
    pub joint: bool,
    pub steps: Vec<StepRecord>,
}

/// Runs prompt sets `1..=upto` on one image and records their outputs.
/// With `joint`, every prompt set is scored by the concatenation of all
/// heads instead of its own head.
pub fn predict_record<T: Scalar>(
    state: &ModelState<T>,
    sample: &PanopticSample,
    image_index: usize,
    upto: usize,
    joint: bool,
) -> Result<ImageRecord> {
    let outputs = forward_all(state, &image_tensor::<T>(sample), upto)?;
    let all_heads: Vec<usize> = (1..=upto).collect();
    let mut steps = Vec::with_capacity(upto);
    for out in &outputs {
        let t = out.step;
        let blocks = apply_heads(state, &out.decoder_embeddings, &all_heads)?;
        let n = out.num_queries();
        let rows = |b: &Tensor<T>, q: usize| b.row(q).iter().map(|v| v.as_f64()).collect::<Vec<_>>();
        let (classes, own_logits, probs, logits) = if joint {
            let classes = (1..=upto)
                .flat_map(|k| state.prompt_sets[k - 1].local_classes.clone())
                .collect();
            let own = (0..n)
                .map(|q| blocks.iter().flat_map(|b| rows(b, q)).collect())
                .collect();
            (classes, own, vec![0.0; n], vec![0.0; n])
        } else {
            let (p, l) = other_head_sums(&blocks, t)?;
            let own = (0..n).map(|q| rows(&blocks[t - 1], q)).collect();
            (state.prompt_sets[t - 1].local_classes.clone(), own, p, l)
        };
        steps.push(StepRecord {
            step: t,
            classes,
            own_logits,
            other_prob_sum: probs,
            other_logit_sum: logits,
            mask_logits: out.mask_logits.data().iter().map(|v| v.as_f64() as f32).collect(),
        });
    }
    Ok(ImageRecord {
        image: image_index,
        height: sample.height,
        width: sample.width,
        mask_resolution: state.config.mask_resolution,
        heads: upto,
        joint,
        steps,
    })
}

/// Query decisions of every prompt set in a record, in (step, query) order.
pub fn decisions_from_record(rec: &ImageRecord, cfg: &InferenceConfig) -> Result<Vec<QueryDecision>> {
    let hw = rec.mask_resolution[0] * rec.mask_resolution[1];
    let heads = if rec.joint { 1 } else { rec.heads };
    let mut out = Vec::new();
    for s in &rec.steps {
        let n = s.num_queries();
        if s.other_prob_sum.len() != n || s.other_logit_sum.len() != n || s.mask_logits.len() != n * hw {
            return Err(Error::Input(format!(
                "record of image {} step {} has inconsistent query counts",
                rec.image, s.step
            )));
        }
        if let Some(row) = s.own_logits.iter().find(|r| r.len() != s.classes.len()) {
            return Err(Error::Input(format!(
                "record of image {} step {}: {} class scores for {} classes",
                rec.image,
                s.step,
                row.len(),
                s.classes.len()
            )));
        }
        let own: Vec<Vec<f64>> = s
            .own_logits
            .iter()
            .map(|r| r.iter().map(|&v| sigmoid(v)).collect())
            .collect();
        let no_obj: Vec<f64> = (0..n)
            .map(|q| no_obj_score(heads, s.other_prob_sum[q], s.other_logit_sum[q], cfg))
            .collect();
        for (q, choice) in decide(&own, &no_obj)?.into_iter().enumerate() {
            let score = match choice {
                Some(c) => own[q][c],
                None => own[q].iter().copied().fold(0.0, f64::max),
            };
            out.push(QueryDecision {
                step: s.step,
                query: q,
                class_id: choice.map(|c| s.classes[c]),
                score,
                mask_probs: s.mask_logits[q * hw..(q + 1) * hw]
                    .iter()
                    .map(|&v| sigmoid(v as f64))
                    .collect(),
            });
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarFile {
    build_id: String,
    config_hash: String,
    record: ImageRecord,
}

fn sidecar_name(image: usize) -> String {
    format!("{image:06}.json")
}

/// Writes one `NNNNNN.json` sidecar per record into `dir`.
pub fn write_records(dir: &Path, config_hash: &str, records: &[ImageRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in records {
        let path = dir.join(sidecar_name(r.image));
        let file = SidecarFile {
            build_id: crate::BUILD_ID.to_string(),
            config_hash: config_hash.to_string(),
            record: r.clone(),
        };
        let json = serde_json::to_string(&file).map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads every sidecar in `dir`, ordered by image index, with the config
/// hash they share. Mixed hashes are a format error.
pub fn read_records(dir: &Path) -> Result<(String, Vec<ImageRecord>)> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut hash: Option<String> = None;
    let mut records = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: SidecarFile =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        match &hash {
            Some(h) if *h != file.config_hash => {
                return Err(Error::format(&path, format!("config hash {} differs from {h}", file.config_hash)));
            }
            None => hash = Some(file.config_hash),
            _ => {}
        }
        records.push(file.record);
    }
    records.sort_by_key(|r| r.image);
    let hash = hash.ok_or_else(|| Error::Input(format!("no sidecar records in {}", dir.display())))?;
    Ok((hash, records))
}
