//! Panoptic quality, mean IoU and their aggregation over class groups.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClassCatalog, PanopticSample, TaskProtocol, VOID};
use crate::error::{Error, Result};
use crate::inference::PanopticPrediction;

/// IoU a same-class pair must exceed to count as a true positive.
pub const MATCH_IOU: f64 = 0.5;

/// Read access to a panoptic map and its segment classes.
pub trait PanopticView {
    fn segment_map(&self) -> &[u32];
    /// `(segment id, class id)` of every segment.
    fn segment_classes(&self) -> Vec<(u32, u32)>;
}

impl PanopticView for PanopticSample {
    fn segment_map(&self) -> &[u32] {
        &self.segment_map
    }

    fn segment_classes(&self) -> Vec<(u32, u32)> {
        self.segments.iter().map(|s| (s.id, s.class_id)).collect()
    }
}

impl PanopticView for PanopticPrediction {
    fn segment_map(&self) -> &[u32] {
        &self.segment_map
    }

    fn segment_classes(&self) -> Vec<(u32, u32)> {
        self.segments.iter().map(|s| (s.id, s.class_id)).collect()
    }
}

/// Named class subsets in reporting order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGroups {
    pub groups: Vec<(String, Vec<u32>)>,
}

impl ClassGroups {
    /// `base` (step 1), `new` (steps 2..=upto), `all`, `things`, `stuff`.
    pub fn from_protocol(protocol: &TaskProtocol, catalog: &ClassCatalog, upto: usize) -> Result<Self> {
        let all: Vec<u32> = protocol.classes_upto(upto)?.into_iter().collect();
        let base: BTreeSet<u32> = protocol.base_classes().iter().copied().collect();
        let pick = |f: &dyn Fn(u32) -> bool| all.iter().copied().filter(|&c| f(c)).collect::<Vec<_>>();
        Ok(ClassGroups {
            groups: vec![
                ("base".into(), pick(&|c| base.contains(&c))),
                ("new".into(), pick(&|c| !base.contains(&c))),
                ("all".into(), all.clone()),
                ("things".into(), pick(&|c| catalog.is_thing(c))),
                ("stuff".into(), pick(&|c| !catalog.is_thing(c))),
            ],
        })
    }

    pub fn get(&self, name: &str) -> Option<&[u32]> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }
}

/// Accumulated matching statistics of one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassStats {
    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    /// `Σ IoU / (TP + FP/2 + FN/2)`.
    pub fn pq(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.iou_sum / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64)
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.tp as f64 / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64)
    }

    fn add(&mut self, o: &ClassStats) {
        self.iou_sum += o.iou_sum;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Unweighted means over the non-empty classes of a group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// Classes that entered the mean; 0 leaves the scores at 0.
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PQResult {
    pub per_class: BTreeMap<u32, ClassStats>,
    pub groups: Vec<(String, GroupScore)>,
}

impl PQResult {
    pub fn group(&self, name: &str) -> Option<GroupScore> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, g)| *g)
    }
}

fn group_scores(per_class: &BTreeMap<u32, ClassStats>, groups: &ClassGroups) -> Vec<(String, GroupScore)> {
    groups
        .groups
        .iter()
        .map(|(name, classes)| {
            let present: Vec<&ClassStats> = classes
                .iter()
                .filter_map(|c| per_class.get(c))
                .filter(|s| !s.is_empty())
                .collect();
            let k = present.len();
            let mean = |f: fn(&ClassStats) -> f64| {
                if k == 0 {
                    0.0
                } else {
                    present.iter().map(|s| f(s)).sum::<f64>() / k as f64
                }
            };
            (
                name.clone(),
                GroupScore {
                    pq: mean(ClassStats::pq),
                    sq: mean(ClassStats::sq),
                    rq: mean(ClassStats::rq),
                    classes: k,
                },
            )
        })
        .collect()
}

/// Matching statistics of one image. Pixels that are void in the ground
/// truth are removed from both sides; an unmatched prediction lying mostly
/// on such pixels is not a false positive.
pub fn image_stats<P: PanopticView + ?Sized, G: PanopticView + ?Sized>(
    pred: &P,
    gt: &G,
) -> Result<BTreeMap<u32, ClassStats>> {
    let (pm, gm) = (pred.segment_map(), gt.segment_map());
    if pm.len() != gm.len() {
        return Err(Error::Input(format!(
            "prediction has {} pixels, ground truth {}",
            pm.len(),
            gm.len()
        )));
    }
    let pred_cls: BTreeMap<u32, u32> = pred.segment_classes().into_iter().collect();
    let gt_cls: BTreeMap<u32, u32> = gt.segment_classes().into_iter().collect();
    let mut pred_area: HashMap<u32, usize> = HashMap::new();
    let mut pred_void: HashMap<u32, usize> = HashMap::new();
    let mut gt_area: HashMap<u32, usize> = HashMap::new();
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &g) in pm.iter().zip(gm) {
        if p != VOID {
            if !pred_cls.contains_key(&p) {
                return Err(Error::Input(format!("predicted segment id {p} has no segment entry")));
            }
            *pred_area.entry(p).or_default() += 1;
            if g == VOID {
                *pred_void.entry(p).or_default() += 1;
            }
        }
        if g != VOID {
            *gt_area.entry(g).or_default() += 1;
            if p != VOID {
                *inter.entry((g, p)).or_default() += 1;
            }
        }
    }
    let mut stats: BTreeMap<u32, ClassStats> = BTreeMap::new();
    let mut gt_matched = BTreeSet::new();
    let mut pred_matched = BTreeSet::new();
    let mut pairs: Vec<(&(u32, u32), &usize)> = inter.iter().collect();
    pairs.sort();
    for (&(g, p), &i) in pairs {
        let (Some(&gc), Some(&pc)) = (gt_cls.get(&g), pred_cls.get(&p)) else {
            continue;
        };
        if gc != pc {
            continue;
        }
        let p_area = pred_area[&p] - pred_void.get(&p).copied().unwrap_or(0);
        let union = (gt_area[&g] + p_area - i) as f64;
        let iou = i as f64 / union;
        if iou > MATCH_IOU {
            assert!(gt_matched.insert(g), "ground-truth segment {g} matched twice");
            assert!(pred_matched.insert(p), "predicted segment {p} matched twice");
            let s = stats.entry(gc).or_default();
            s.tp += 1;
            s.iou_sum += iou;
        }
    }
    for (&g, &c) in &gt_cls {
        if !gt_matched.contains(&g) && gt_area.get(&g).copied().unwrap_or(0) > 0 {
            stats.entry(c).or_default().fn_ += 1;
        }
    }
    for (&p, &c) in &pred_cls {
        let area = pred_area.get(&p).copied().unwrap_or(0);
        if pred_matched.contains(&p) || area == 0 {
            continue;
        }
        if 2 * pred_void.get(&p).copied().unwrap_or(0) > area {
            continue;
        }
        stats.entry(c).or_default().fp += 1;
    }
    Ok(stats)
}

/// PQ, SQ and RQ per class and per group over aligned image lists.
pub fn panoptic_quality<P: PanopticView, G: PanopticView>(
    preds: &[P],
    gts: &[G],
    groups: &ClassGroups,
) -> Result<PQResult> {
    if preds.len() != gts.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} ground-truth images",
            preds.len(),
            gts.len()
        )));
    }
    let mut per_class: BTreeMap<u32, ClassStats> = BTreeMap::new();
    for (p, g) in preds.iter().zip(gts) {
        for (c, s) in image_stats(p, g)? {
            per_class.entry(c).or_default().add(&s);
        }
    }
    let groups = group_scores(&per_class, groups);
    Ok(PQResult { per_class, groups })
}

/// Pixel counts of one class over a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl PixelStats {
    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            self.tp as f64 / d as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUResult {
    pub per_class: BTreeMap<u32, PixelStats>,
    /// `(group, mean IoU, classes averaged)`.
    pub groups: Vec<(String, f64, usize)>,
}

/// Dataset-accumulated IoU per class over class maps; pixels void in the
/// ground truth are skipped.
pub fn mean_iou(pred_maps: &[Vec<u32>], gt_maps: &[Vec<u32>], groups: &ClassGroups) -> Result<IoUResult> {
    if pred_maps.len() != gt_maps.len() {
        return Err(Error::Input(format!(
            "{} predicted maps for {} ground-truth maps",
            pred_maps.len(),
            gt_maps.len()
        )));
    }
    let mut per_class: BTreeMap<u32, PixelStats> = BTreeMap::new();
    for (pm, gm) in pred_maps.iter().zip(gt_maps) {
        if pm.len() != gm.len() {
            return Err(Error::Input(format!("map sizes {} and {} differ", pm.len(), gm.len())));
        }
        for (&p, &g) in pm.iter().zip(gm) {
            if g == VOID {
                continue;
            }
            if p == g {
                per_class.entry(g).or_default().tp += 1;
            } else {
                per_class.entry(g).or_default().fn_ += 1;
                if p != VOID {
                    per_class.entry(p).or_default().fp += 1;
                }
            }
        }
    }
    let groups = groups
        .groups
        .iter()
        .map(|(name, classes)| {
            let ious: Vec<f64> = classes
                .iter()
                .filter_map(|c| per_class.get(c))
                .filter(|s| s.tp + s.fp + s.fn_ > 0)
                .map(PixelStats::iou)
                .collect();
            let mean = if ious.is_empty() {
                0.0
            } else {
                ious.iter().sum::<f64>() / ious.len() as f64
            };
            (name.clone(), mean, ious.len())
        })
        .collect();
    Ok(IoUResult { per_class, groups })
}

/// One reporting row: a group with its scores in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub pq: String,
    pub sq: String,
    pub rq: String,
    pub classes: usize,
}

/// Percent with one decimal.
pub fn percent(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// `base`, `new` and `all` rows, in that order.
pub fn group_report(result: &PQResult) -> Vec<ReportRow> {
    ["base", "new", "all"]
        .iter()
        .filter_map(|name| {
            result.group(name).map(|g| ReportRow {
                group: name.to_string(),
                pq: percent(g.pq),
                sq: percent(g.sq),
                rq: percent(g.rq),
                classes: g.classes,
            })
        })
        .collect()
}

/// Provenance line heading every CSV artifact.
pub fn provenance_line(config_hash: &str) -> String {
    format!("# config_hash={config_hash} build_id={}\n", crate::BUILD_ID)
}

/// Per-class CSV of a PQ result.
pub fn per_class_csv(result: &PQResult, catalog: &ClassCatalog, config_hash: &str) -> String {
    let mut out = provenance_line(config_hash);
    out.push_str("class_id,name,is_thing,tp,fp,fn,iou_sum,pq,sq,rq\n");
    for (c, s) in &result.per_class {
        let (name, thing) = catalog
            .get(*c)
            .map_or((String::new(), false), |i| (i.name.clone(), i.is_thing));
        out.push_str(&format!(
            "{c},{name},{thing},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            s.tp,
            s.fp,
            s.fn_,
            s.iou_sum,
            s.pq(),
            s.sq(),
            s.rq()
        ));
    }
    out
}

/// Group CSV of a PQ result, scores in percent.
pub fn group_csv(result: &PQResult, config_hash: &str) -> String {
    let mut out = provenance_line(config_hash);
    out.push_str("group,pq,sq,rq,classes\n");
    for (name, g) in &result.groups {
        out.push_str(&format!(
            "{name},{},{},{},{}\n",
            percent(g.pq),
            percent(g.sq),
            percent(g.rq),
            g.classes
        ));
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    build_id: &'a str,
    config_hash: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    step: Option<usize>,
    result: &'a PQResult,
}

/// JSON summary of a PQ result.
pub fn summary_json(result: &PQResult, config_hash: &str, step: Option<usize>) -> String {
    serde_json::to_string_pretty(&Summary {
        build_id: crate::BUILD_ID,
        config_hash,
        step,
        result,
    })
    .expect("summary serializes")
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
