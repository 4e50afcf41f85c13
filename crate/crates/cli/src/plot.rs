use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use opencil::engine::RunReport;
use opencil::eval::CurvePoint;
use plotters::prelude::*;

use crate::run::REPORT_FILE;
use crate::{Classify, CliResult};

const SIZE: (u32, u32) = (720, 480);
const METRIC_COLORS: [RGBColor; 3] = [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44)];

/// Every `report.json` below `dir`, sorted by path.
pub fn find_reports(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == REPORT_FILE) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Stable file-name prefix for a report: its directory relative to the root.
fn label(root: &Path, report: &Path) -> String {
    let rel = report
        .parent()
        .and_then(|p| p.strip_prefix(root).ok())
        .map(|p| p.to_string_lossy().replace(['/', '\\'], "_"))
        .unwrap_or_default();
    if rel.is_empty() {
        "run".into()
    } else {
        rel
    }
}

fn draw_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("drawing failed: {e:?}")
}

fn bar_chart(path: &Path, title: &str, report: &RunReport) -> anyhow::Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let n = report.tasks.len();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..n as f64, 0f64..1.05f64)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n.max(1))
        .x_label_formatter(&|x| format!("task {}", x.floor() as usize + 1))
        .y_desc("score")
        .draw()
        .map_err(draw_err)?;
    let width = 0.8 / 3.0;
    for (k, name) in ["OSCR", "ACC", "AUC"].iter().enumerate() {
        let color = METRIC_COLORS[k];
        let bars = report.tasks.iter().enumerate().map(move |(i, m)| {
            let v = [m.oscr, m.closed_acc, m.auc][k];
            let x0 = i as f64 + 0.1 + k as f64 * width;
            Rectangle::new([(x0, 0.0), (x0 + width, v)], color.filled())
        });
        chart
            .draw_series(bars)
            .map_err(draw_err)?
            .label(*name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

fn curve_chart(path: &Path, title: &str, curves: &[(String, &[CurvePoint])]) -> anyhow::Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..1f64, 0f64..1.02f64)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("false positive rate (unknowns)")
        .y_desc("correct classification rate (knowns)")
        .draw()
        .map_err(draw_err)?;
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(curve.iter().map(|p| (p.fpr, p.ccr)), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// Writes `<label>-bars.svg` and one `<label>-curve-task-<t>.svg` per task
/// for every report, plus `overlay.svg` comparing the last-task curves when
/// there are at least two reports. Returns the written paths.
pub fn render(report_dir: &Path, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let paths = find_reports(report_dir)
        .with_context(|| format!("reading {}", report_dir.display()))
        .validation()?;
    if paths.is_empty() {
        return Err(anyhow!("no {REPORT_FILE} under {}", report_dir.display())).validation();
    }
    let mut reports = Vec::with_capacity(paths.len());
    for p in &paths {
        let text = fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))
            .validation()?;
        let r = RunReport::from_json(&text)
            .with_context(|| format!("corrupt report {}", p.display()))
            .validation()?;
        reports.push((label(report_dir, p), r));
    }
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .runtime()?;

    let mut written = Vec::new();
    for (name, r) in &reports {
        let title = format!("{} (seed {})", r.method, r.config.seed);
        let bars = out_dir.join(format!("{name}-bars.svg"));
        bar_chart(&bars, &title, r).runtime()?;
        written.push(bars);
        for m in &r.tasks {
            let path = out_dir.join(format!("{name}-curve-task-{}.svg", m.task_index));
            let curve_title = format!("{title}, task {}", m.task_index);
            curve_chart(&path, &curve_title, &[(format!("OSCR {:.3}", m.oscr), &m.curve)]).runtime()?;
            written.push(path);
        }
    }
    if reports.len() >= 2 {
        let curves: Vec<(String, &[CurvePoint])> = reports
            .iter()
            .map(|(name, r)| {
                let last = r.tasks.last().expect("reports hold at least one task");
                (format!("{name} ({}, OSCR {:.3})", r.method, last.oscr), last.curve.as_slice())
            })
            .collect();
        let path = out_dir.join("overlay.svg");
        curve_chart(&path, "last-task CCR-FPR curves", &curves).runtime()?;
        written.push(path);
    }
    Ok(written)
}

pub fn cmd_plot(report_dir: &Path, output: Option<PathBuf>) -> CliResult<()> {
    let out = output.unwrap_or_else(|| report_dir.join("plots"));
    for p in render(report_dir, &out)? {
        println!("{}", p.display());
    }
    Ok(())
}
