//! Experiment report files: one JSON with everything, one CSV per grid,
//! curve and table, a checks CSV, and a plot-data JSON whose figures mirror
//! the grid/curve/table layouts.
//!
//! Rendering is a pure function of the report, so loading the JSON and
//! re-emitting produces byte-identical CSVs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use shapelab_core::experiment::{Check, CheckOp, Curve, ExperimentReport, Grid};

/// File-name stem for a report: experiment id plus the role when present.
pub fn report_stem(report: &ExperimentReport) -> String {
    let role = report
        .config
        .iter()
        .find(|(k, _)| k == "role")
        .map(|(_, v)| format!("_{v}"))
        .unwrap_or_default();
    format!("{}{role}", report.experiment)
}

fn grid_csv(path: &Path, grid: &Grid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("create {path:?}"))?);
    write!(w, "row")?;
    for c in &grid.col_labels {
        write!(w, ",{c}")?;
    }
    writeln!(w)?;
    let cols = grid.col_labels.len();
    for (ri, r) in grid.row_labels.iter().enumerate() {
        write!(w, "{r}")?;
        for ci in 0..cols {
            write!(w, ",{}", grid.values[ri * cols + ci])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn curve_csv(path: &Path, curve: &Curve) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("create {path:?}"))?);
    write!(w, "{}", curve.x_label)?;
    for s in &curve.series {
        write!(w, ",{}", s.label)?;
    }
    writeln!(w)?;
    for (i, x) in curve.x.iter().enumerate() {
        write!(w, "{x}")?;
        for s in &curve.series {
            write!(w, ",{}", s.values[i])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn checks_csv(path: &Path, checks: &[Check]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("create {path:?}"))?);
    writeln!(w, "id,value,op,threshold,passed,description")?;
    for c in checks {
        let op = match c.op {
            CheckOp::AtLeast => ">=",
            CheckOp::AtMost => "<=",
        };
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.id, c.value, op, c.threshold, c.passed, c.description
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PlotFigure<'a> {
    id: &'a str,
    kind: &'static str,
    x_label: Option<&'a str>,
    x: Option<&'a [f32]>,
    row_labels: Option<&'a [String]>,
    col_labels: Option<&'a [String]>,
    series: Option<Vec<PlotSeries<'a>>>,
    values: Option<&'a [f32]>,
}

#[derive(Serialize)]
struct PlotSeries<'a> {
    label: &'a str,
    values: &'a [f32],
}

fn plot_json(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut figures = Vec::new();
    for g in &report.grids {
        figures.push(PlotFigure {
            id: &g.id,
            kind: "grid",
            x_label: None,
            x: None,
            row_labels: Some(&g.row_labels),
            col_labels: Some(&g.col_labels),
            series: None,
            values: Some(&g.values),
        });
    }
    for c in &report.curves {
        figures.push(PlotFigure {
            id: &c.id,
            kind: "curve",
            x_label: Some(&c.x_label),
            x: Some(&c.x),
            row_labels: None,
            col_labels: None,
            series: Some(
                c.series
                    .iter()
                    .map(|s| PlotSeries {
                        label: &s.label,
                        values: &s.values,
                    })
                    .collect(),
            ),
            values: None,
        });
    }
    for t in &report.tables {
        figures.push(PlotFigure {
            id: &t.id,
            kind: "table",
            x_label: None,
            x: None,
            row_labels: Some(&t.row_labels),
            col_labels: Some(&t.col_labels),
            series: None,
            values: Some(&t.values),
        });
    }
    let json = serde_json::json!({
        "experiment": report.experiment,
        "checkpoint_fingerprint": report.checkpoint_fingerprint,
        "figures": figures,
    });
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("create {path:?}"))?);
    serde_json::to_writer_pretty(&mut w, &json)?;
    w.flush()?;
    Ok(())
}

/// Write every render of the report into `dir`; returns the JSON path.
pub fn save_report(dir: &Path, report: &ExperimentReport) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let stem = report_stem(report);
    let json_path = dir.join(format!("{stem}.json"));
    let mut w =
        BufWriter::new(File::create(&json_path).with_context(|| format!("create {json_path:?}"))?);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.flush()?;
    render_report_files(dir, report)?;
    Ok(json_path)
}

/// Render the CSV and plot-data files (everything except the JSON itself).
pub fn render_report_files(dir: &Path, report: &ExperimentReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let stem = report_stem(report);
    for g in &report.grids {
        grid_csv(&dir.join(format!("{stem}.{}.csv", g.id)), g)?;
    }
    for c in &report.curves {
        curve_csv(&dir.join(format!("{stem}.{}.csv", c.id)), c)?;
    }
    for t in &report.tables {
        grid_csv(&dir.join(format!("{stem}.{}.csv", t.id)), t)?;
    }
    checks_csv(&dir.join(format!("{stem}.checks.csv")), &report.checks)?;
    plot_json(&dir.join(format!("{stem}.plot.json")), report)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path).with_context(|| format!("read {path:?}"))?;
    Ok(serde_json::from_str(&text)?)
}
