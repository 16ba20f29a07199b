//! Text outputs of a run: per-instance CSV, key-value summaries, the
//! ablation table, and rolling-MAE line plots as standalone SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::Mode;
use super::metrics::{rolling_mae, Metrics};
use super::tta::{InstanceRecord, Timeline};
use crate::error::{Error, Result};

pub const RECORDS_HEADER: &str = "index,start,delta,pred_hr,gt_hr,abs_error,loss,l_t,l_s,branch,lambda,grad_norm,pa_grad_norm,final_grad_norm";

/// Floats are written in Rust's shortest round-trip form so the file
/// reproduces the in-memory values exactly.
pub fn records_csv(records: &[InstanceRecord]) -> String {
    let mut out = String::from(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.index,
            r.start,
            r.delta,
            r.pred_hr,
            r.gt_hr,
            r.abs_error(),
            r.loss,
            r.temporal,
            r.spatial,
            r.branch,
            r.lambda,
            r.grad_norm,
            r.pa_grad_norm,
            r.final_grad_norm
        )
        .expect("writing to a string");
    }
    out
}

pub fn parse_records_csv(text: &str) -> Result<Vec<InstanceRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(RECORDS_HEADER) {
        return Err(Error::CorruptHeader(
            "records file has an unexpected header row".into(),
        ));
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let row = n + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            return Err(Error::CorruptHeader(format!(
                "records row {row}: expected 14 fields, found {}",
                fields.len()
            )));
        }
        let bad = |col: &str| Error::CorruptHeader(format!("records row {row}: bad {col}"));
        let int = |i: usize, col: &str| fields[i].parse::<usize>().map_err(|_| bad(col));
        let float = |i: usize, col: &str| fields[i].parse::<f64>().map_err(|_| bad(col));
        records.push(InstanceRecord {
            index: int(0, "index")?,
            start: int(1, "start")?,
            delta: int(2, "delta")?,
            pred_hr: float(3, "pred_hr")?,
            gt_hr: float(4, "gt_hr")?,
            loss: float(6, "loss")?,
            temporal: float(7, "l_t")?,
            spatial: float(8, "l_s")?,
            branch: fields[9].to_string(),
            lambda: float(10, "lambda")?,
            grad_norm: float(11, "grad_norm")?,
            pa_grad_norm: float(12, "pa_grad_norm")?,
            final_grad_norm: float(13, "final_grad_norm")?,
        });
    }
    Ok(records)
}

fn metric_lines(out: &mut String, prefix: &str, m: &Metrics) {
    writeln!(out, "{prefix}mae = {}", m.mae).expect("string write");
    writeln!(out, "{prefix}rmse = {}", m.rmse).expect("string write");
    writeln!(out, "{prefix}pearson = {}", m.pearson_text()).expect("string write");
}

/// `key = value` summary of one timeline.
pub fn summary_text(t: &Timeline) -> String {
    let mut out = String::new();
    writeln!(out, "mode = {}", t.mode).expect("string write");
    writeln!(out, "instances = {}", t.records.len()).expect("string write");
    writeln!(out, "errors = {}", t.errors).expect("string write");
    metric_lines(&mut out, "", &t.overall);
    writeln!(out, "trailing_instances = {}", t.trailing_count).expect("string write");
    metric_lines(&mut out, "trailing_", &t.trailing);
    out
}

/// Fixed-width comparison table, one row per mode.
pub fn ablation_table(timelines: &[Timeline]) -> String {
    let mut out = format!(
        "{:<10} {:>9} {:>10} {:>10} {:>10} {:>10} {:>10} {:>7}\n",
        "mode", "instances", "mae", "rmse", "pearson", "trail_mae", "trail_rmse", "errors"
    );
    let r = |m: &Metrics| {
        m.pearson
            .map_or("undefined".to_string(), |r| format!("{r:.4}"))
    };
    for t in timelines {
        writeln!(
            out,
            "{:<10} {:>9} {:>10.4} {:>10.4} {:>10} {:>10.4} {:>10.4} {:>7}",
            t.mode.as_str(),
            t.records.len(),
            t.overall.mae,
            t.overall.rmse,
            r(&t.overall),
            t.trailing.mae,
            t.trailing.rmse,
            t.errors
        )
        .expect("string write");
    }
    out
}

const PALETTE: [&str; 5] = ["#444444", "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

/// Line plot of rolling MAE per mode.
pub fn rolling_mae_svg(timelines: &[Timeline], window: usize) -> String {
    let (width, height) = (800.0, 450.0);
    let (left, right, top, bottom) = (60.0, 150.0, 30.0, 50.0);
    let curves: Vec<(Mode, Vec<f64>)> = timelines
        .iter()
        .map(|t| (t.mode, rolling_mae(&t.abs_errors(), window)))
        .collect();
    let n = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let finite = || {
        curves
            .iter()
            .flat_map(|(_, c)| c.iter().copied())
            .filter(|v| v.is_finite())
    };
    let y_max = finite().fold(0.0_f64, f64::max).max(1e-9) * 1.05;
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let x_of = |i: usize| left + plot_w * i as f64 / (n.max(2) - 1) as f64;
    let y_of = |v: f64| top + plot_h * (1.0 - v / y_max);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    )
    .expect("string write");
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).expect("string write");
    writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle">rolling MAE (bpm), window {window}</text>"#,
        left + plot_w / 2.0
    )
    .expect("string write");
    writeln!(
        svg,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + plot_h,
        left + plot_w
    )
    .expect("string write");
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            left - 6.0,
            y_of(v) + 4.0
        )
        .expect("string write");
    }
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">instance (window end)</text>"#,
        left + plot_w / 2.0,
        height - 15.0
    )
    .expect("string write");

    for (i, (mode, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = curve
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(j, &v)| format!("{:.2},{:.2}", x_of(j), y_of(v)))
            .collect();
        if !points.is_empty() {
            writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                points.join(" ")
            )
            .expect("string write");
        }
        let ly = top + 20.0 * i as f64 + 10.0;
        writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{mode}</text>"#,
            width - right + 15.0,
            width - right + 40.0,
            width - right + 45.0,
            ly + 4.0
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    svg
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `records.csv` and `summary.txt` for one timeline under `dir`.
pub fn write_timeline(dir: &Path, t: &Timeline) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("records.csv"), &records_csv(&t.records))?;
    write_text(&dir.join("summary.txt"), &summary_text(t))
}
