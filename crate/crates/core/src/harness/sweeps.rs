//! δ sweeps over stored query records, class-ordering sweeps and component
//! ablations.

use std::path::PathBuf;

use super::config::ExperimentConfig;
use super::run::{evaluate_records, load_eval_set, run_scenario, sidecar_dir, RunOptions};
use crate::error::{Error, Result};
use crate::inference::{read_records, InferenceConfig};
use crate::metrics::{percent, provenance_line, write_text, PQResult};
use crate::model::PromptMode;

/// Base, new and all-class PQ as fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupPq {
    pub base: f64,
    pub new: f64,
    pub all: f64,
}

impl GroupPq {
    pub fn of(r: &PQResult) -> Self {
        let g = |n: &str| r.group(n).map_or(0.0, |g| g.pq);
        GroupPq {
            base: g("base"),
            new: g("new"),
            all: g("all"),
        }
    }

    fn csv(&self) -> String {
        format!("{},{},{}", percent(self.base), percent(self.new), percent(self.all))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaRow {
    pub delta: f64,
    pub pq: GroupPq,
}

/// Re-decides the final query records of a finished run for each δ; the
/// network is not evaluated again. Writes `sweep_delta.csv`.
pub fn sweep_delta(cfg: &ExperimentConfig, deltas: &[f64]) -> Result<Vec<DeltaRow>> {
    let (hash, records) = read_records(&sidecar_dir(&cfg.output_dir))?;
    if hash != cfg.hash() {
        return Err(Error::CheckpointMismatch(format!(
            "query records were written under config hash {hash}, current config hashes to {}",
            cfg.hash()
        )));
    }
    let (catalog, eval) = load_eval_set(cfg)?;
    let protocol = cfg.protocol_for(&catalog)?;
    let upto = protocol.num_steps();
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let inference = InferenceConfig {
            delta,
            ..cfg.inference.clone()
        };
        inference.validate()?;
        let e = evaluate_records(&records, &eval, &catalog, &protocol, upto, &inference, false)?;
        rows.push(DeltaRow {
            delta,
            pq: GroupPq::of(&e.pq),
        });
    }
    let mut text = provenance_line(&hash);
    text.push_str("delta,base_pq,new_pq,all_pq\n");
    for r in &rows {
        text.push_str(&format!("{},{}\n", r.delta, r.pq.csv()));
    }
    write_text(&cfg.output_dir.join("sweep_delta.csv"), &text)?;
    Ok(rows)
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile `p` of sorted values: linear interpolation at rank `(n − 1)·p`.
fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Quartiles {
        min: v[0],
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderingRow {
    pub index: usize,
    pub ordering_seed: Option<u64>,
    pub pq: GroupPq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderingSummary {
    pub rows: Vec<OrderingRow>,
    /// `(group, summary)` for base, new and all.
    pub quartiles: Vec<(String, Quartiles)>,
}

/// Ordering `i` of a sweep: the configured one first, then seeded shuffles.
pub fn ordering_seed(cfg: &ExperimentConfig, i: usize) -> Option<u64> {
    match (i, cfg.protocol.ordering_seed) {
        (0, s) => s,
        (i, Some(s)) => Some(s + i as u64),
        (i, None) => Some(i as u64),
    }
}

/// Full scenarios under `n` class orderings, each in its own directory
/// below `orderings/`. Writes `orderings.csv` and `orderings_box.csv`.
pub fn sweep_orderings(cfg: &ExperimentConfig, n: usize, opts: RunOptions) -> Result<OrderingSummary> {
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = cfg.clone();
        c.protocol.ordering_seed = ordering_seed(cfg, i);
        c.output_dir = cfg.output_dir.join("orderings").join(format!("ordering_{i}"));
        let bundle = run_scenario(&c, opts)?;
        rows.push(OrderingRow {
            index: i,
            ordering_seed: c.protocol.ordering_seed,
            pq: GroupPq::of(&bundle.final_eval.pq),
        });
    }
    let mut summary = OrderingSummary {
        rows,
        quartiles: Vec::new(),
    };
    let hash = cfg.hash();
    let mut text = provenance_line(&hash);
    text.push_str("index,ordering_seed,base_pq,new_pq,all_pq\n");
    for r in &summary.rows {
        let seed = r.ordering_seed.map_or(String::new(), |s| s.to_string());
        text.push_str(&format!("{},{seed},{}\n", r.index, r.pq.csv()));
    }
    write_text(&cfg.output_dir.join("orderings.csv"), &text)?;
    let mut boxes = provenance_line(&hash);
    boxes.push_str("group,min,q1,median,q3,max\n");
    let groups: [(&str, fn(&GroupPq) -> f64); 3] = [("base", |g| g.base), ("new", |g| g.new), ("all", |g| g.all)];
    for (name, f) in groups {
        let values: Vec<f64> = summary.rows.iter().map(|r| f(&r.pq)).collect();
        if let Some(q) = quartiles(&values) {
            boxes.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                percent(q.min),
                percent(q.q1),
                percent(q.median),
                percent(q.q3),
                percent(q.max)
            ));
            summary.quartiles.push((name.to_string(), q));
        }
    }
    write_text(&cfg.output_dir.join("orderings_box.csv"), &boxes)?;
    Ok(summary)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationSwitches {
    pub shallow: bool,
    pub no_logit_manipulation: bool,
    /// Prompts per incremental step, one run per value.
    pub prompt_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub pq: GroupPq,
    /// Trainable scalars at the last step.
    pub trainable: usize,
    /// Multiply-accumulates of a forward pass over every prompt set.
    pub flops: u64,
}

/// Output directory of an ablation variant.
pub fn ablation_dir(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir.join("ablation").join(name)
}

/// The configured run first, then one run per switch. The configured run
/// lives in the output directory itself and is reused when present.
/// Writes `ablation.csv`.
pub fn ablate(cfg: &ExperimentConfig, switches: &AblationSwitches) -> Result<Vec<AblationRow>> {
    let row = |name: &str, b: &super::run::ReportBundle, pq: &PQResult| AblationRow {
        name: name.to_string(),
        pq: GroupPq::of(pq),
        trainable: b.steps.last().map_or(0, |s| s.trainable),
        flops: b.flops,
    };
    let main = run_scenario(cfg, RunOptions { resume: true })?;
    let mut rows = vec![row("main", &main, &main.final_eval.pq)];
    if switches.shallow {
        let mut c = cfg.clone();
        c.model.prompt_mode = PromptMode::Shallow;
        c.output_dir = ablation_dir(cfg, "shallow");
        let b = run_scenario(&c, RunOptions { resume: true })?;
        rows.push(row("shallow", &b, &b.final_eval.pq));
    }
    if switches.no_logit_manipulation {
        let (_, records) = read_records(&sidecar_dir(&cfg.output_dir))?;
        let (catalog, eval) = load_eval_set(cfg)?;
        let protocol = cfg.protocol_for(&catalog)?;
        let inference = InferenceConfig {
            logit_manipulation: false,
            ..cfg.inference.clone()
        };
        let e = evaluate_records(&records, &eval, &catalog, &protocol, protocol.num_steps(), &inference, false)?;
        rows.push(row("no_logit_manipulation", &main, &e.pq));
    }
    for &n in &switches.prompt_counts {
        if n == 0 {
            return Err(Error::Config("prompt counts must be >= 1".into()));
        }
        let mut c = cfg.clone();
        let (catalog, _) = load_eval_set(cfg)?;
        let protocol = cfg.protocol_for(&catalog)?;
        let first = cfg.model.num_queries(1, protocol.step_classes(1)?.len());
        c.model.prompt_counts = std::iter::once(first)
            .chain(std::iter::repeat_n(n, protocol.num_steps() - 1))
            .collect();
        let name = format!("prompts_{n}");
        c.output_dir = ablation_dir(cfg, &name);
        let b = run_scenario(&c, RunOptions { resume: true })?;
        rows.push(row(&name, &b, &b.final_eval.pq));
    }
    let mut text = provenance_line(&cfg.hash());
    text.push_str("variant,base_pq,new_pq,all_pq,trainable,flops\n");
    for r in &rows {
        text.push_str(&format!("{},{},{},{}\n", r.name, r.pq.csv(), r.trainable, r.flops));
    }
    write_text(&cfg.output_dir.join("ablation.csv"), &text)?;
    Ok(rows)
}
