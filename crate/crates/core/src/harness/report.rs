//! Regret tables: raw per-step records, per-step percentile summaries and
//! an SVG plot of median regret with its interquartile band.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RegretRecord;
use crate::env::Trajectory;
use crate::error::{Error, Result};

pub const RAW_FILE: &str = "raw.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PLOT_FILE: &str = "regret.svg";

#[derive(Debug, Serialize, Deserialize)]
struct RawRow {
    method: String,
    variant_id: String,
    seed: u64,
    step: usize,
    x_json: String,
    y: f64,
    y_best: f64,
    regret: f64,
    wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub step: usize,
    pub regret_p25: f64,
    pub regret_p50: f64,
    pub regret_p75: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub raw: PathBuf,
    pub summary: PathBuf,
    pub plot: Option<PathBuf>,
}

/// Percentile `p ∈ [0, 1]` of sorted values, interpolating linearly
/// between the closest ranks.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of nothing");
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile(&v, 0.5)
}

/// Per-method, per-step regret quartiles.
pub fn summarize(records: &[RegretRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry((r.method.as_str(), r.step)).or_default().push(r.regret);
    }
    groups
        .into_iter()
        .map(|((method, step), mut v)| {
            v.sort_by(f64::total_cmp);
            SummaryRow {
                method: method.to_string(),
                step,
                regret_p25: percentile(&v, 0.25),
                regret_p50: percentile(&v, 0.5),
                regret_p75: percentile(&v, 0.75),
                n_runs: v.len(),
            }
        })
        .collect()
}

/// Final regret of every run, grouped by method.
pub fn final_regrets(records: &[RegretRecord]) -> BTreeMap<String, Vec<f64>> {
    let mut last: BTreeMap<(&str, &str, u64), &RegretRecord> = BTreeMap::new();
    for r in records {
        let e = last.entry((&r.method, &r.variant_id, r.seed)).or_insert(r);
        if r.step > e.step {
            *e = r;
        }
    }
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((method, _, _), r) in last {
        out.entry(method.to_string()).or_default().push(r.regret);
    }
    out
}

pub fn write_raw_csv(records: &[RegretRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(RawRow {
            method: r.method.clone(),
            variant_id: r.variant_id.clone(),
            seed: r.seed,
            step: r.step,
            x_json: serde_json::to_string(&r.x)?,
            y: r.y,
            y_best: r.y_best,
            regret: r.regret,
            wall_time_ms: r.wall_time_ms,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw_csv(path: impl AsRef<Path>) -> Result<Vec<RegretRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<RawRow>()
        .map(|row| {
            let row = row?;
            Ok(RegretRecord {
                method: row.method,
                variant_id: row.variant_id,
                seed: row.seed,
                step: row.step,
                x: serde_json::from_str(&row.x_json)?,
                y: row.y,
                y_best: row.y_best,
                regret: row.regret,
                wall_time_ms: row.wall_time_ms,
            })
        })
        .collect()
}

pub fn write_summary_csv(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Per-step log of trajectories: variant, step, point, value, reward and
/// best value so far.
pub fn write_trajectory_log<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
    epsilon: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant_id", "step", "x_json", "y", "reward", "best_so_far"])?;
    for traj in trajectories {
        for (i, best) in traj.best_so_far().into_iter().enumerate() {
            w.write_record([
                traj.variant_id.clone(),
                (i + 1).to_string(),
                serde_json::to_string(&traj.xs()[i])?,
                traj.ys()[i].to_string(),
                traj.reward(i, epsilon).to_string(),
                best.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Records from every `raw.csv` under `dir`, in path order.
pub fn load_records(dir: impl AsRef<Path>) -> Result<Vec<RegretRecord>> {
    fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, found)?;
            } else if p.file_name().is_some_and(|n| n == RAW_FILE) {
                found.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir.as_ref(), &mut files)?;
    let mut records = Vec::new();
    for f in files {
        records.extend(read_raw_csv(f)?);
    }
    Ok(records)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Median regret per method against step, with the 25th to 75th
/// percentile band shaded.
pub fn render_svg(rows: &[SummaryRow]) -> String {
    let (w, h) = (800.0, 500.0);
    let (left, right, top, bottom) = (70.0, 170.0, 30.0, 50.0);
    let max_step = rows.iter().map(|r| r.step).max().unwrap_or(1).max(2) as f64;
    let min_step = rows.iter().map(|r| r.step).min().unwrap_or(1) as f64;
    let y_max = rows.iter().map(|r| r.regret_p75).filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let y_max = if y_max > 0.0 { y_max * 1.05 } else { 1.0 };
    let sx = |s: f64| left + (s - min_step) / (max_step - min_step).max(1.0) * (w - left - right);
    let sy = |v: f64| top + (1.0 - v.clamp(0.0, y_max) / y_max) * (h - top - bottom);

    let mut by_method: BTreeMap<&str, Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        by_method.entry(&r.method).or_default().push(r);
    }
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (left, w - right, top, h - bottom);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=5 {
        let v = y_max * k as f64 / 5.0;
        let y = sy(v);
        let _ = writeln!(svg, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, x0 - 6.0, y + 4.0);
        let s = min_step + (max_step - min_step) * k as f64 / 5.0;
        let x = sx(s);
        let _ = writeln!(svg, r#"<line x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{}" stroke="black"/>"#, y1 + 4.0);
        let _ = writeln!(svg, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, y1 + 18.0, s.round());
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, (x0 + x1) / 2.0, h - 10.0);
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">regret</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (k, (method, series)) in by_method.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut band: Vec<String> = series.iter().map(|r| format!("{:.2},{:.2}", sx(r.step as f64), sy(r.regret_p75))).collect();
        band.extend(series.iter().rev().map(|r| format!("{:.2},{:.2}", sx(r.step as f64), sy(r.regret_p25))));
        let _ = writeln!(svg, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, band.join(" "));
        let line: Vec<String> = series.iter().map(|r| format!("{:.2},{:.2}", sx(r.step as f64), sy(r.regret_p50))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = top + 20.0 * k as f64;
        let _ = writeln!(svg, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, x1 + 15.0, x1 + 40.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{method}</text>"#, x1 + 46.0, ly + 4.0);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the raw records, the summary and optionally the plot to `out_dir`.
pub fn emit_report(records: &[RegretRecord], out_dir: impl AsRef<Path>, plot: bool) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(Error::NothingToReport);
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let raw = dir.join(RAW_FILE);
    let summary = dir.join(SUMMARY_FILE);
    write_raw_csv(records, &raw)?;
    let rows = summarize(records);
    write_summary_csv(&rows, &summary)?;
    let plot = if plot {
        let p = dir.join(PLOT_FILE);
        fs::write(&p, render_svg(&rows))?;
        Some(p)
    } else {
        None
    };
    Ok(ReportFiles { raw, summary, plot })
}
