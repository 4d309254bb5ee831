//! Continual scenarios: data loading, per-step training with checkpoints,
//! evaluation through query records and report files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use sha2::{Digest, Sha256};

use super::config::{DataSource, ExperimentConfig};
use crate::data::coco::read_coco_panoptic;
use crate::data::{generate_dataset_at, restrict_classes, ClassCatalog, PanopticSample, TaskProtocol};
use crate::error::{Error, Result};
use crate::inference::{
    decisions_from_record, panoptic_merge, predict_record, semantic_merge, write_records, ImageRecord,
    InferenceConfig, PanopticPrediction,
};
use crate::metrics::{
    group_csv, mean_iou, panoptic_quality, per_class_csv, percent, provenance_line, summary_json, write_text,
    ClassGroups, IoUResult, PQResult,
};
use crate::model::checkpoint::read_manifest;
use crate::model::{add_step, init_model, load_checkpoint, save_checkpoint, ModelState, ParamGroup};
use crate::training::{append_loss_log, train_task, Objective};

/// Catalog with training and evaluation images.
pub struct Datasets {
    pub catalog: ClassCatalog,
    pub train: Vec<PanopticSample>,
    pub eval: Vec<PanopticSample>,
}

fn check_sizes(cfg: &ExperimentConfig, samples: &[PanopticSample], what: &str) -> Result<()> {
    let [h, w] = cfg.model.image_size;
    match samples.iter().find(|s| s.height != h || s.width != w) {
        Some(s) => Err(Error::Input(format!(
            "{what} image of {}x{} does not match image_size {h}x{w}",
            s.height, s.width
        ))),
        None => Ok(()),
    }
}

/// Evaluation images and catalog only.
pub fn load_eval_set(cfg: &ExperimentConfig) -> Result<(ClassCatalog, Vec<PanopticSample>)> {
    let d = &cfg.dataset;
    let (catalog, eval) = match d.source {
        DataSource::Synthetic => (
            d.scene.catalog(),
            generate_dataset_at(&d.scene, d.train_size as u64, d.eval_size)?,
        ),
        DataSource::Coco => {
            let c = d.coco.as_ref().expect("validated coco paths");
            read_coco_panoptic(&c.eval_annotations, &c.eval_images)?
        }
    };
    check_sizes(cfg, &eval, "evaluation")?;
    Ok((catalog, eval))
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.dataset;
    let (catalog, eval) = load_eval_set(cfg)?;
    let train = match d.source {
        DataSource::Synthetic => generate_dataset_at(&d.scene, 0, d.train_size)?,
        DataSource::Coco => {
            let c = d.coco.as_ref().expect("validated coco paths");
            let (train_catalog, train) = read_coco_panoptic(&c.train_annotations, &c.train_images)?;
            if train_catalog != catalog {
                return Err(Error::Config(
                    "training and evaluation annotations use different categories".into(),
                ));
            }
            train
        }
    };
    check_sizes(cfg, &train, "training")?;
    Ok(Datasets { catalog, train, eval })
}

/// Scores of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub step: usize,
    pub pq: PQResult,
    pub miou: Option<IoUResult>,
}

/// Query records of every evaluation image with heads `1..=upto`.
pub fn collect_records(
    state: &ModelState<f32>,
    eval: &[PanopticSample],
    upto: usize,
    joint: bool,
) -> Result<Vec<ImageRecord>> {
    eval.iter()
        .enumerate()
        .map(|(i, s)| predict_record(state, s, i, upto, joint))
        .collect()
}

/// Panoptic prediction of one record.
pub fn predict_panoptic(
    rec: &ImageRecord,
    catalog: &ClassCatalog,
    inference: &InferenceConfig,
) -> Result<PanopticPrediction> {
    let decisions = decisions_from_record(rec, inference)?;
    panoptic_merge(&decisions, rec.mask_resolution, [rec.height, rec.width], catalog, inference)
}

/// Scores records against ground truth restricted to the classes of steps
/// `1..=upto`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_records(
    records: &[ImageRecord],
    eval: &[PanopticSample],
    catalog: &ClassCatalog,
    protocol: &TaskProtocol,
    upto: usize,
    inference: &InferenceConfig,
    semantic: bool,
) -> Result<Evaluation> {
    if records.len() != eval.len() {
        return Err(Error::Input(format!(
            "{} records for {} evaluation images",
            records.len(),
            eval.len()
        )));
    }
    let seen = protocol.classes_upto(upto)?;
    let gts: Vec<PanopticSample> = eval.iter().map(|s| restrict_classes(s, &seen)).collect();
    let groups = ClassGroups::from_protocol(protocol, catalog, upto)?;
    let mut preds = Vec::with_capacity(records.len());
    let mut sem = Vec::new();
    for rec in records {
        let decisions = decisions_from_record(rec, inference)?;
        let size = [rec.height, rec.width];
        preds.push(panoptic_merge(&decisions, rec.mask_resolution, size, catalog, inference)?);
        if semantic {
            sem.push(semantic_merge(&decisions, rec.mask_resolution, size, inference)?);
        }
    }
    let pq = panoptic_quality(&preds, &gts, &groups)?;
    let miou = if semantic {
        let gt_maps: Vec<Vec<u32>> = gts.iter().map(PanopticSample::class_map).collect();
        Some(mean_iou(&sem, &gt_maps, &groups)?)
    } else {
        None
    };
    Ok(Evaluation { step: upto, pq, miou })
}

/// Records reduced to prompt set 1 scored by head 1 alone.
pub fn first_step_records(records: &[ImageRecord]) -> Vec<ImageRecord> {
    records
        .iter()
        .map(|r| ImageRecord {
            heads: 1,
            joint: false,
            steps: r.steps[..1].to_vec(),
            ..r.clone()
        })
        .collect()
}

/// Hex sha256 over the tensors that exist after step 1.
pub fn step1_digest(state: &ModelState<f32>) -> String {
    let mut h = Sha256::new();
    for p in state.params() {
        let first = match p.group {
            ParamGroup::Prompts(t) | ParamGroup::Head(t) => t == 1,
            _ => true,
        };
        if first {
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepSummary {
    pub step: usize,
    /// Scheduled training iterations of the step.
    pub iterations: usize,
    pub trainable: usize,
    pub step1_digest: String,
    pub eval: Option<Evaluation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportBundle {
    pub config_hash: String,
    pub method: Objective,
    pub output_dir: PathBuf,
    pub steps: Vec<StepSummary>,
    /// Evaluation after the last step with every head.
    pub final_eval: Evaluation,
    /// Prompt set 1 with head 1 alone after the last step, against base
    /// ground truth; only for per-step heads.
    pub first_head_eval: Option<Evaluation>,
    /// Multiply-accumulates of one forward pass over every prompt set.
    pub flops: u64,
}

impl ReportBundle {
    pub fn step_eval(&self, t: usize) -> Option<&Evaluation> {
        self.steps.get(t.checked_sub(1)?)?.eval.as_ref()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Restore steps whose checkpoint exists instead of retraining them.
    pub resume: bool,
}

pub fn checkpoint_dir(output_dir: &Path, t: usize) -> PathBuf {
    output_dir.join("checkpoints").join(format!("step_{t}"))
}

pub fn sidecar_dir(output_dir: &Path) -> PathBuf {
    output_dir.join("sidecars")
}

/// Restores step `t` if resuming and its checkpoint exists. A checkpoint
/// written under another config hash is a mismatch.
fn try_restore(dir: &Path, hash: &str, resume: bool) -> Result<Option<ModelState<f32>>> {
    if !resume || !dir.join("manifest.json").exists() {
        return Ok(None);
    }
    let m = read_manifest(dir)?;
    if m.config_hash != hash {
        return Err(Error::CheckpointMismatch(format!(
            "{} was written under config hash {}, current config hashes to {hash}",
            dir.display(),
            m.config_hash
        )));
    }
    Ok(Some(load_checkpoint::<f32>(dir)?.0))
}

/// Runs every step of the scenario: train (or restore), checkpoint and
/// evaluate; then writes sidecars and reports into the output directory.
pub fn run_scenario(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ReportBundle> {
    cfg.validate()?;
    let hash = cfg.hash();
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.toml"), &format!("# config_hash={hash}\n{}", cfg.to_toml()))?;
    let data = load_datasets(cfg)?;
    let protocol = cfg.protocol_for(&data.catalog).map_err(|e| match e {
        Error::Protocol(m) => Error::Config(m),
        other => other,
    })?;
    let joint = cfg.method == Objective::Finetune;
    let loss_log = out.join("loss_log.csv");
    if !opts.resume && loss_log.exists() {
        fs::remove_file(&loss_log).map_err(|e| Error::io(&loss_log, e))?;
    }
    if !loss_log.exists() {
        write_text(&loss_log, &provenance_line(&hash))?;
    }

    let steps_total = protocol.num_steps();
    let mut state: Option<ModelState<f32>> = None;
    let mut steps = Vec::with_capacity(steps_total);
    let mut final_records = Vec::new();
    for t in 1..=steps_total {
        let dir = checkpoint_dir(out, t);
        let iterations = cfg.training.iterations(protocol.step_classes(t)?.len());
        let restored = try_restore(&dir, &hash, opts.resume)?;
        let s = match restored {
            Some(s) => {
                info!("step {t}: restored from {}", dir.display());
                s
            }
            None => {
                let mut s = match state.take() {
                    None => init_model::<f32>(&cfg.model, &protocol, cfg.training.seed)?,
                    Some(mut s) => {
                        add_step(&mut s, protocol.step_classes(t)?, cfg.training.seed)?;
                        if joint {
                            s.unfreeze_all();
                        }
                        s
                    }
                };
                let view = crate::data::step_view(&data.train, &protocol, t)?;
                let started = Instant::now();
                let report = train_task(&mut s, &view, t, &cfg.training, &cfg.matching, cfg.method)?;
                info!(
                    "step {t}: {} images, {} iterations in {:.1}s",
                    view.len(),
                    report.iterations,
                    started.elapsed().as_secs_f64()
                );
                append_loss_log(&loss_log, &report.log)?;
                save_checkpoint(&s, &dir, &hash)?;
                s
            }
        };
        let eval = if t == steps_total || cfg.evaluation.every_step {
            let records = collect_records(&s, &data.eval, t, joint)?;
            let e = evaluate_records(
                &records,
                &data.eval,
                &data.catalog,
                &protocol,
                t,
                &cfg.inference,
                cfg.evaluation.semantic,
            )?;
            info!("step {t}: all-class PQ {}", percent(e.pq.group("all").map_or(0.0, |g| g.pq)));
            if t == steps_total {
                final_records = records;
            }
            Some(e)
        } else {
            None
        };
        steps.push(StepSummary {
            step: t,
            iterations,
            trainable: s.count_trainable(),
            step1_digest: step1_digest(&s),
            eval,
        });
        state = Some(s);
    }
    let state = state.expect("at least one step");
    let final_eval = steps[steps_total - 1].eval.clone().expect("final step is evaluated");
    let first_head_eval = if joint {
        None
    } else {
        Some(evaluate_records(
            &first_step_records(&final_records),
            &data.eval,
            &data.catalog,
            &protocol,
            1,
            &cfg.inference,
            false,
        )?)
    };
    write_records(&sidecar_dir(out), &hash, &final_records)?;
    let bundle = ReportBundle {
        config_hash: hash,
        method: cfg.method,
        output_dir: out.clone(),
        steps,
        final_eval,
        first_head_eval,
        flops: state.count_flops(steps_total)?,
    };
    write_reports(&bundle, &data.catalog)?;
    Ok(bundle)
}

/// Per-step CSV rows `step,group,pq,sq,rq,classes`.
pub fn steps_csv(bundle: &ReportBundle) -> String {
    let mut out = provenance_line(&bundle.config_hash);
    out.push_str("step,group,pq,sq,rq,classes\n");
    for s in &bundle.steps {
        let Some(e) = &s.eval else { continue };
        for (name, g) in &e.pq.groups {
            out.push_str(&format!(
                "{},{name},{},{},{},{}\n",
                s.step,
                percent(g.pq),
                percent(g.sq),
                percent(g.rq),
                g.classes
            ));
        }
    }
    out
}

fn write_reports(bundle: &ReportBundle, catalog: &ClassCatalog) -> Result<()> {
    let out = &bundle.output_dir;
    let hash = &bundle.config_hash;
    let fin = &bundle.final_eval;
    write_text(&out.join("steps.csv"), &steps_csv(bundle))?;
    write_text(&out.join("pq_per_class.csv"), &per_class_csv(&fin.pq, catalog, hash))?;
    write_text(&out.join("pq_groups.csv"), &group_csv(&fin.pq, hash))?;
    write_text(&out.join("summary.json"), &summary_json(&fin.pq, hash, Some(fin.step)))?;
    if let Some(e) = &bundle.first_head_eval {
        write_text(&out.join("first_head_groups.csv"), &group_csv(&e.pq, hash))?;
    }
    if let Some(m) = &fin.miou {
        let mut text = provenance_line(hash);
        text.push_str("group,miou,classes\n");
        for (name, v, k) in &m.groups {
            text.push_str(&format!("{name},{},{k}\n", percent(*v)));
        }
        write_text(&out.join("miou_groups.csv"), &text)?;
    }
    let mut steps = provenance_line(hash);
    steps.push_str("step,iterations,trainable,step1_digest\n");
    for s in &bundle.steps {
        steps.push_str(&format!("{},{},{},{}\n", s.step, s.iterations, s.trainable, s.step1_digest));
    }
    write_text(&out.join("params.csv"), &steps)
}
