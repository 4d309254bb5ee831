//! Command-line entry point for continual panoptic segmentation experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;
use pcl_core::harness::{
    ablate, emit_plots, export_predictions, generate_data, run_scenario, sweep_delta, sweep_orderings,
    AblationSwitches, ExperimentConfig, RunOptions,
};
use pcl_core::metrics::{group_report, percent};
use pcl_core::Error;

#[derive(Parser)]
#[command(name = "pcl", version, about = "Continual panoptic segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the configured one.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Training seed, overriding the configured one.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic datasets as binary caches and COCO panoptic files.
    GenerateData(Common),
    /// Train and evaluate every step of a scenario.
    Run {
        #[command(flatten)]
        common: Common,
        /// Restore steps from existing checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Re-evaluate a finished run from its checkpoints without training.
    Eval(Common),
    /// Re-decide a finished run's query records for several delta values.
    SweepDelta {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.3, 0.5, 0.7, 1.0])]
        deltas: Vec<f64>,
    },
    /// Run the scenario under several class orderings.
    SweepOrderings {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long)]
        resume: bool,
    },
    /// Run component ablations next to the configured scenario.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        shallow: bool,
        #[arg(long)]
        no_logit_manipulation: bool,
        /// Prompts per incremental step, one run per value.
        #[arg(long, value_delimiter = ',')]
        prompt_counts: Vec<usize>,
    },
    /// Write the final panoptic predictions in COCO panoptic format.
    ExportPredictions(Common),
}

fn load(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(dir) = &c.output {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = c.seed {
        cfg.training.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(bundle: &pcl_core::harness::ReportBundle) {
    println!("config_hash {}", bundle.config_hash);
    println!("{:<6} {:>6} {:>6} {:>6}", "group", "PQ", "SQ", "RQ");
    for r in group_report(&bundle.final_eval.pq) {
        println!("{:<6} {:>6} {:>6} {:>6}", r.group, r.pq, r.sq, r.rq);
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData(c) => {
            let dir = generate_data(&load(&c)?)?;
            println!("{}", dir.display());
        }
        Command::Run { common, resume } => {
            let cfg = load(&common)?;
            let bundle = run_scenario(&cfg, RunOptions { resume })?;
            emit_plots(&cfg.output_dir)?;
            print_report(&bundle);
        }
        Command::Eval(c) => {
            let cfg = load(&c)?;
            let last = pcl_core::harness::checkpoint_dir(&cfg.output_dir, last_step(&cfg)?);
            if !last.join("manifest.json").exists() {
                anyhow::bail!("no final checkpoint at {}", last.display());
            }
            let bundle = run_scenario(&cfg, RunOptions { resume: true })?;
            print_report(&bundle);
        }
        Command::SweepDelta { common, deltas } => {
            let cfg = load(&common)?;
            let rows = sweep_delta(&cfg, &deltas)?;
            emit_plots(&cfg.output_dir)?;
            println!("{:>6} {:>6} {:>6} {:>6}", "delta", "base", "new", "all");
            for r in rows {
                println!(
                    "{:>6} {:>6} {:>6} {:>6}",
                    r.delta,
                    percent(r.pq.base),
                    percent(r.pq.new),
                    percent(r.pq.all)
                );
            }
        }
        Command::SweepOrderings { common, n, resume } => {
            let cfg = load(&common)?;
            let summary = sweep_orderings(&cfg, n, RunOptions { resume })?;
            emit_plots(&cfg.output_dir)?;
            for (group, q) in summary.quartiles {
                println!(
                    "{group:<5} min {} q1 {} median {} q3 {} max {}",
                    percent(q.min),
                    percent(q.q1),
                    percent(q.median),
                    percent(q.q3),
                    percent(q.max)
                );
            }
        }
        Command::Ablate {
            common,
            shallow,
            no_logit_manipulation,
            prompt_counts,
        } => {
            let cfg = load(&common)?;
            let switches = AblationSwitches {
                shallow,
                no_logit_manipulation,
                prompt_counts,
            };
            println!("{:<22} {:>6} {:>6} {:>6} {:>10} {:>12}", "variant", "base", "new", "all", "trainable", "flops");
            for r in ablate(&cfg, &switches)? {
                println!(
                    "{:<22} {:>6} {:>6} {:>6} {:>10} {:>12}",
                    r.name,
                    percent(r.pq.base),
                    percent(r.pq.new),
                    percent(r.pq.all),
                    r.trainable,
                    r.flops
                );
            }
        }
        Command::ExportPredictions(c) => {
            let file = export_predictions(&load(&c)?)?;
            println!("{}", file.display());
        }
    }
    Ok(())
}

fn last_step(cfg: &ExperimentConfig) -> anyhow::Result<usize> {
    let (catalog, _) = pcl_core::harness::load_eval_set(cfg)?;
    Ok(cfg.protocol_for(&catalog).context("building the task protocol")?.num_steps())
}

/// 2 for configuration errors, 3 for checkpoint mismatches, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::CheckpointMismatch(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
