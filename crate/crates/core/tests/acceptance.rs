//! Acceptance run: one pass/fail line per criterion, then a tally.
//!
//! Criteria 6 to 8 train the desk scenario from `configs/` into
//! `target/acceptance/` from scratch. A failed criterion is reported and
//! counted; the exit status is nonzero only when a criterion could not be
//! evaluated, or when `PCL_ACCEPTANCE_STRICT` is set and any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use pcl_core::harness::{run_scenario, sweep_delta, ExperimentConfig, GroupPq, ReportBundle, RunOptions};
use pcl_core::model::PromptMode;

type Check = Result<(bool, String), String>;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_config(name: &str, output: &str) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(&workspace().join("configs").join(name)).map_err(|e| e.to_string())?;
    cfg.output_dir = workspace().join("target/acceptance").join(output);
    Ok(cfg)
}

fn timed<T>(f: impl FnOnce() -> Result<T, String>) -> Result<(T, Duration), String> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed()))
}

fn within(limit_secs: u64, d: Duration) -> (bool, String) {
    (d.as_secs() < limit_secs, format!("{:.1}s of {limit_secs}s", d.as_secs_f64()))
}

fn pts(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn freeze() -> Check {
    let (diff, d) = timed(|| freeze_invariance(20))?;
    let (fast, time) = within(60, d);
    Ok((diff <= 1e-6 && fast, format!("max |Δ| of earlier logits {diff:e} on 20 images, {time}")))
}

fn accounting() -> Check {
    let n = trainable_accounting()?;
    Ok((true, format!("closed form and registry agree on {n} states of 5 configs")))
}

fn gradients() -> Check {
    let ([first, later], d) = timed(gradient_checks)?;
    let (fast, time) = within(120, d);
    let worst = first.max_rel_error.max(later.max_rel_error);
    let pass = worst < 1e-4 && later.frozen_max_abs == 0.0 && first.frozen_max_abs == 0.0 && fast;
    Ok((
        pass,
        format!(
            "max rel error {worst:.2e} over {} scalars, frozen |g| max {}, {time}",
            first.checked + later.checked,
            later.frozen_max_abs
        ),
    ))
}

fn matching() -> Check {
    hungarian_matches_brute_force(100, 2024)?;
    Ok((true, "100 instances up to 7x7 equal brute force".into()))
}

fn pq_oracle() -> Check {
    let ((), d) = timed(|| pq_agrees_with_oracle(200, 31))?;
    let perfect = perfect_prediction_scores(3);
    let (fast, time) = within(60, d);
    Ok((
        perfect == (1.0, 1.0, 1.0) && fast,
        format!("200 scenes equal the oracle, perfect prediction PQ/SQ/RQ {perfect:?}, {time}"),
    ))
}

struct Scenario {
    eclipse: ReportBundle,
    eclipse_cfg: ExperimentConfig,
    finetune: ReportBundle,
    times: [Duration; 2],
}

fn scenario() -> Result<Scenario, String> {
    let eclipse_cfg = desk_config("eclipse_12-4.toml", "eclipse_12-4")?;
    let finetune_cfg = desk_config("finetune_12-4.toml", "finetune_12-4")?;
    let fresh = RunOptions { resume: false };
    let (eclipse, te) = timed(|| run_scenario(&eclipse_cfg, fresh).map_err(|e| e.to_string()))?;
    let (finetune, tf) = timed(|| run_scenario(&finetune_cfg, fresh).map_err(|e| e.to_string()))?;
    Ok(Scenario {
        eclipse,
        eclipse_cfg,
        finetune,
        times: [te, tf],
    })
}

fn end_to_end(s: &Scenario) -> Check {
    let e = GroupPq::of(&s.eclipse.final_eval.pq);
    let f = GroupPq::of(&s.finetune.final_eval.pq);
    let step1 = s.eclipse.step_eval(1).ok_or("step 1 of the eclipse run was not evaluated")?;
    let e1 = GroupPq::of(&step1.pq).base;
    let a = 100.0 * f.base < 5.0;
    let b = 100.0 * (e1 - e.base).abs() <= 2.0;
    let c = e.all > f.all;
    let (fast_e, time_e) = within(1800, s.times[0]);
    let (fast_f, time_f) = within(1800, s.times[1]);
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    Ok((
        a && b && c && fast_e && fast_f,
        format!(
            "(a) finetune base {} [{}]; (b) eclipse base {} vs step 1 {} [{}]; (c) all {} vs {} [{}]; eclipse {time_e}, finetune {time_f}",
            pts(f.base),
            mark(a),
            pts(e.base),
            pts(e1),
            mark(b),
            pts(e.all),
            pts(f.all),
            mark(c)
        ),
    ))
}

fn delta_effect(s: &Scenario) -> Check {
    let (rows, d) = timed(|| sweep_delta(&s.eclipse_cfg, &[0.0, 0.5]).map_err(|e| e.to_string()))?;
    let (zero, half) = (rows[0].pq.all, rows[1].pq.all);
    let (fast, time) = within(60, d);
    Ok((
        100.0 * (half - zero) >= 1.0 && fast,
        format!("all-class PQ {} at δ=0.5 vs {} at δ=0, sweep {time}", pts(half), pts(zero)),
    ))
}

fn shallow_vs_deep(s: &Scenario) -> Check {
    let mut cfg = s.eclipse_cfg.clone();
    cfg.model.prompt_mode = PromptMode::Shallow;
    cfg.output_dir = workspace().join("target/acceptance/eclipse_12-4_shallow");
    let shallow = run_scenario(&cfg, RunOptions { resume: false }).map_err(|e| e.to_string())?;
    let deep = GroupPq::of(&s.eclipse.final_eval.pq).new;
    let shallow = GroupPq::of(&shallow.final_eval.pq).new;
    // a tie is a difference of at most half a point
    let pass = deep >= shallow || 100.0 * (shallow - deep) <= 0.5;
    Ok((pass, format!("new-class PQ deep {} vs shallow {}", pts(deep), pts(shallow))))
}

fn additivity() -> Check {
    let n = attention_additivity()?;
    Ok((true, format!("counter equals Σf(N^k) < f(ΣN^k) for T = 2..={}", n + 1)))
}

fn formats() -> Check {
    coco_round_trip(50)?;
    let distinct = codec_bijective(10_000, 10)?;
    Ok((true, format!("50 samples round-trip, {distinct} distinct ids of 10000 decode back")))
}

fn main() -> ExitCode {
    let mut outcomes: Vec<Option<bool>> = Vec::new();
    let mut report = |id: usize, name: &str, check: Check| {
        let line = match &check {
            Ok((true, detail)) => format!("PASS  {id:>2} {name}: {detail}"),
            Ok((false, detail)) => format!("FAIL  {id:>2} {name}: {detail}"),
            Err(e) => format!("ERROR {id:>2} {name}: {e}"),
        };
        println!("{line}");
        outcomes.push(check.ok().map(|c| c.0));
    };
    report(1, "freeze invariance", freeze());
    report(2, "trainable accounting", accounting());
    report(3, "gradient check", gradients());
    report(4, "matching optimality", matching());
    report(5, "PQ oracle", pq_oracle());
    match scenario() {
        Ok(s) => {
            report(6, "end-to-end 12-4", end_to_end(&s));
            report(7, "delta effect", delta_effect(&s));
            report(8, "deep vs shallow prompts", shallow_vs_deep(&s));
        }
        Err(e) => {
            for (id, name) in [(6, "end-to-end 12-4"), (7, "delta effect"), (8, "deep vs shallow prompts")] {
                report(id, name, Err(e.clone()));
            }
        }
    }
    report(9, "attention additivity", additivity());
    report(10, "format fidelity", formats());
    let passed = outcomes.iter().filter(|o| **o == Some(true)).count();
    let errors = outcomes.iter().filter(|o| o.is_none()).count();
    println!("acceptance: {passed}/{} criteria pass", outcomes.len());
    let strict = std::env::var_os("PCL_ACCEPTANCE_STRICT").is_some();
    if errors > 0 || (strict && passed < outcomes.len()) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
