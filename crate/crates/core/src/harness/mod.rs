//! Experiment orchestration: configuration, continual scenarios with
//! checkpoints, sweeps, ablations, data and prediction export, and plots.

pub mod config;
pub mod plots;
pub mod run;
pub mod sweeps;

use std::path::PathBuf;

use crate::data::cache::write_cache;
use crate::data::coco::write_coco_panoptic;
use crate::error::{Error, Result};
use crate::inference::read_records;

pub use config::{CocoPaths, DataSource, DatasetConfig, EvaluationConfig, ExperimentConfig, ProtocolConfig};
pub use plots::emit_plots;
pub use run::{
    checkpoint_dir, collect_records, evaluate_records, first_step_records, load_datasets, load_eval_set,
    predict_panoptic, run_scenario, sidecar_dir, step1_digest, steps_csv, Datasets, Evaluation, ReportBundle,
    RunOptions, StepSummary,
};
pub use sweeps::{
    ablate, ablation_dir, ordering_seed, quartiles, sweep_delta, sweep_orderings, AblationRow, AblationSwitches,
    DeltaRow, GroupPq, OrderingRow, OrderingSummary, Quartiles,
};

/// Writes the synthetic training and evaluation sets below `data/`, both as
/// binary caches and in COCO panoptic format. Returns the data directory.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    if cfg.dataset.source != DataSource::Synthetic {
        return Err(Error::Config("generate-data needs dataset.source = \"synthetic\"".into()));
    }
    let data = load_datasets(cfg)?;
    let dir = cfg.output_dir.join("data");
    let hash = cfg.hash();
    let seed = cfg.dataset.scene.seed;
    for (name, samples) in [("train", &data.train), ("eval", &data.eval)] {
        write_cache(&dir.join(format!("{name}_cache")), &data.catalog, samples, seed, &hash)?;
        write_coco_panoptic(
            &dir.join("coco").join(format!("panoptic_{name}.json")),
            &dir.join("coco").join(format!("{name}_images")),
            &data.catalog,
            samples,
        )?;
    }
    Ok(dir)
}

/// Writes the final panoptic predictions of a finished run in COCO panoptic
/// format below `predictions/`. Returns the annotation file.
pub fn export_predictions(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let (hash, records) = read_records(&sidecar_dir(&cfg.output_dir))?;
    if hash != cfg.hash() {
        return Err(Error::CheckpointMismatch(format!(
            "query records were written under config hash {hash}, current config hashes to {}",
            cfg.hash()
        )));
    }
    let (catalog, eval) = load_eval_set(cfg)?;
    let samples = records
        .iter()
        .map(|r| {
            let image = eval
                .get(r.image)
                .ok_or_else(|| Error::Input(format!("record for missing evaluation image {}", r.image)))?;
            Ok(predict_panoptic(r, &catalog, &cfg.inference)?.to_sample(image.image.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = cfg.output_dir.join("predictions");
    let file = dir.join("panoptic_predictions.json");
    write_coco_panoptic(&file, &dir.join("images"), &catalog, &samples)?;
    Ok(file)
}
