//! SVG figures derived only from the CSV artifacts of a run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};

const SIZE: (u32, u32) = (640, 420);
const SERIES: [(&str, RGBColor); 3] = [("base", BLUE), ("new", RED), ("all", BLACK)];

fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<R>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("plot: {e}"))
}

/// Line chart of named series over a shared x axis.
fn line_chart(path: &Path, title: &str, x_label: &str, series: &BTreeMap<String, Vec<(f64, f64)>>) -> Result<()> {
    let xs = series.values().flatten().map(|p| p.0);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let pad = if x1 > x0 { 0.05 * (x1 - x0) } else { 0.5 };
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d((x0 - pad)..(x1 + pad), 0.0..100.0)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc("PQ (%)")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (name, color) in SERIES {
        let Some(points) = series.get(name) else { continue };
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(path, e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

#[derive(Deserialize)]
struct StepRow {
    step: usize,
    group: String,
    pq: f64,
}

#[derive(Deserialize)]
struct DeltaRow {
    delta: f64,
    base_pq: f64,
    new_pq: f64,
    all_pq: f64,
}

#[derive(Deserialize)]
struct BoxRow {
    group: String,
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
}

fn boxplot(path: &Path, rows: &[BoxRow]) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let n = rows.len() as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption("PQ over class orderings", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(-0.5..(n - 0.5), 0.0..100.0)
        .map_err(|e| plot_err(path, e))?;
    let names: Vec<String> = rows.iter().map(|r| r.group.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(rows.len())
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-9 && i >= 0.0 {
                names.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("PQ (%)")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (i, r) in rows.iter().enumerate() {
        let x = i as f64;
        let (l, rr) = (x - 0.25, x + 0.25);
        let style = BLACK.stroke_width(1);
        chart
            .draw_series([Rectangle::new([(l, r.q1), (rr, r.q3)], BLUE.mix(0.3).filled())])
            .map_err(|e| plot_err(path, e))?;
        let lines = [
            vec![(l, r.q1), (rr, r.q1), (rr, r.q3), (l, r.q3), (l, r.q1)],
            vec![(l, r.median), (rr, r.median)],
            vec![(x, r.q3), (x, r.max)],
            vec![(x, r.q1), (x, r.min)],
            vec![(x - 0.1, r.max), (x + 0.1, r.max)],
            vec![(x - 0.1, r.min), (x + 0.1, r.min)],
        ];
        chart
            .draw_series(lines.into_iter().map(|pts| PathElement::new(pts, style)))
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// Writes `steps.svg`, `sweep_delta.svg` and `orderings.svg` for whichever
/// of `steps.csv`, `sweep_delta.csv` and `orderings_box.csv` exist with at
/// least one row. Returns the files written.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let steps = dir.join("steps.csv");
    if steps.exists() {
        let rows: Vec<StepRow> = read_csv(&steps)?;
        let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in rows {
            series.entry(r.group).or_default().push((r.step as f64, r.pq));
        }
        if !series.is_empty() {
            let out = dir.join("steps.svg");
            line_chart(&out, "PQ after each step", "step", &series)?;
            written.push(out);
        }
    }
    let sweep = dir.join("sweep_delta.csv");
    if sweep.exists() {
        let rows: Vec<DeltaRow> = read_csv(&sweep)?;
        if !rows.is_empty() {
            let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for r in &rows {
                series.entry("base".into()).or_default().push((r.delta, r.base_pq));
                series.entry("new".into()).or_default().push((r.delta, r.new_pq));
                series.entry("all".into()).or_default().push((r.delta, r.all_pq));
            }
            let out = dir.join("sweep_delta.svg");
            line_chart(&out, "PQ against delta", "delta", &series)?;
            written.push(out);
        }
    }
    let boxes = dir.join("orderings_box.csv");
    if boxes.exists() {
        let rows: Vec<BoxRow> = read_csv(&boxes)?;
        if !rows.is_empty() {
            let out = dir.join("orderings.svg");
            boxplot(&out, &rows)?;
            written.push(out);
        }
    }
    Ok(written)
}
