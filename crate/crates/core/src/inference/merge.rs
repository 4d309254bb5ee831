//! Assembly of query decisions into panoptic and semantic maps.

use std::collections::BTreeMap;

use super::{InferenceConfig, OverlapRule, QueryDecision};
use crate::data::{ClassCatalog, PanopticSample, Segment, VOID};
use crate::error::{Error, Result};

/// Mask probability a query needs to claim a pixel.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredSegment {
    pub id: u32,
    pub class_id: u32,
    pub is_thing: bool,
    /// Highest score among the queries merged into the segment.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanopticPrediction {
    pub height: usize,
    pub width: usize,
    /// Segment id per pixel, row-major, void as 0.
    pub segment_map: Vec<u32>,
    pub segments: Vec<PredSegment>,
}

impl PanopticPrediction {
    /// The prediction as a sample carrying `image`.
    pub fn to_sample(&self, image: Vec<f32>) -> PanopticSample {
        PanopticSample {
            height: self.height,
            width: self.width,
            image,
            segment_map: self.segment_map.clone(),
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    id: s.id,
                    class_id: s.class_id,
                    is_thing: s.is_thing,
                })
                .collect(),
        }
    }

    /// Class id per pixel, void as 0.
    pub fn class_map(&self) -> Vec<u32> {
        let by_id: BTreeMap<u32, u32> = self.segments.iter().map(|s| (s.id, s.class_id)).collect();
        self.segment_map
            .iter()
            .map(|id| by_id.get(id).copied().unwrap_or(VOID))
            .collect()
    }
}

/// Bilinear resampling of a row-major `h × w` map to `out_h × out_w` with
/// half-pixel centers; samples beyond the border repeat the edge.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "source map size");
    let coords = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    };
    let (ys, xs) = (coords(h, out_h), coords(w, out_w));
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn kept_upsampled(
    decisions: &[QueryDecision],
    mask_res: [usize; 2],
    size: [usize; 2],
) -> Result<Vec<(&QueryDecision, u32, Vec<f64>)>> {
    let [h, w] = mask_res;
    let mut kept = Vec::new();
    for d in decisions {
        if d.mask_probs.len() != h * w {
            return Err(Error::Input(format!(
                "query ({}, {}) has {} mask values, expected {}",
                d.step,
                d.query,
                d.mask_probs.len(),
                h * w
            )));
        }
        if let Some(c) = d.class_id {
            kept.push((d, c, upsample_bilinear(&d.mask_probs, h, w, size[0], size[1])));
        }
    }
    Ok(kept)
}

/// Panoptic map from decisions of every prompt set. Queries are visited by
/// descending score (ties in input order) and each pixel goes to the first
/// query claiming it. No-object queries contribute nothing.
pub fn panoptic_merge(
    decisions: &[QueryDecision],
    mask_res: [usize; 2],
    size: [usize; 2],
    catalog: &ClassCatalog,
    cfg: &InferenceConfig,
) -> Result<PanopticPrediction> {
    let OverlapRule::ConfidenceOrder = cfg.overlap_rule;
    let mut kept = kept_upsampled(decisions, mask_res, size)?;
    kept.sort_by(|a, b| b.0.score.total_cmp(&a.0.score));
    let pixels = size[0] * size[1];
    let mut owner: Vec<Option<usize>> = vec![None; pixels];
    for (p, o) in owner.iter_mut().enumerate() {
        *o = kept.iter().position(|(_, _, m)| m[p] > MASK_THRESHOLD);
    }
    let mut area = vec![0usize; kept.len()];
    for &i in owner.iter().flatten() {
        area[i] += 1;
    }
    let mut segments: Vec<PredSegment> = Vec::new();
    let mut seg_of = vec![VOID; kept.len()];
    let mut stuff: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, (d, class_id, _)) in kept.iter().enumerate() {
        if area[i] == 0 || area[i] < cfg.min_segment_pixels {
            continue;
        }
        let is_thing = catalog.is_thing(*class_id);
        if !is_thing {
            if let Some(&j) = stuff.get(class_id) {
                seg_of[i] = segments[j].id;
                segments[j].score = segments[j].score.max(d.score);
                continue;
            }
            stuff.insert(*class_id, segments.len());
        }
        let id = segments.len() as u32 + 1;
        seg_of[i] = id;
        segments.push(PredSegment {
            id,
            class_id: *class_id,
            is_thing,
            score: d.score,
        });
    }
    let segment_map = owner.iter().map(|o| o.map_or(VOID, |i| seg_of[i])).collect();
    Ok(PanopticPrediction {
        height: size[0],
        width: size[1],
        segment_map,
        segments,
    })
}

/// Class map where each pixel takes the class with the largest
/// `Σ score · mask probability` over its queries; pixels whose total mass
/// over all classes is below the single-head threshold are void.
pub fn semantic_merge(
    decisions: &[QueryDecision],
    mask_res: [usize; 2],
    size: [usize; 2],
    cfg: &InferenceConfig,
) -> Result<Vec<u32>> {
    let kept = kept_upsampled(decisions, mask_res, size)?;
    let pixels = size[0] * size[1];
    let mut out = vec![VOID; pixels];
    let mut mass: BTreeMap<u32, f64> = BTreeMap::new();
    for (p, slot) in out.iter_mut().enumerate() {
        mass.clear();
        for (d, c, m) in &kept {
            *mass.entry(*c).or_insert(0.0) += d.score * m[p];
        }
        let total: f64 = mass.values().sum();
        if total < cfg.single_head_threshold {
            continue;
        }
        let mut best: Option<(u32, f64)> = None;
        for (&c, &v) in &mass {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        *slot = best.map_or(VOID, |(c, _)| c);
    }
    Ok(out)
}
