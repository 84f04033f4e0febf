//! Text tables and accuracy-vs-epoch plots from a metrics directory.
//!
//! Output is a pure function of the files on disk (sorted, no timestamps),
//! so regenerating from the same metrics gives identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use irn_core::config::ExperimentConfig;
use irn_core::train::{ablation_registry, read_metrics, AblationResult, MetricsRecord, ABLATION_FILE, METRICS_FILE};
use irn_core::Result;

pub const REPORT_DIR: &str = "report";
pub const NO_RUNS: &str = "no runs found\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    /// `(file name, svg)` pairs.
    pub plots: Vec<(String, String)>,
}

/// A run directory's name and its metric history.
#[derive(Clone, Debug, PartialEq)]
pub struct RunHistory {
    pub name: String,
    pub records: Vec<MetricsRecord>,
}

impl RunHistory {
    pub fn curve(&self, split: &str) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| (r.epoch as f64, r.top1))
            .collect()
    }
}

pub fn read_ablation(dir: &Path) -> Result<Option<Vec<AblationResult>>> {
    let path = dir.join(ABLATION_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let rows = fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(rows))
}

pub fn read_runs(dir: &Path) -> Result<Vec<RunHistory>> {
    let runs = dir.join("runs");
    if !runs.is_dir() {
        return Ok(Vec::new());
    }
    let mut names: Vec<String> = fs::read_dir(&runs)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(METRICS_FILE).exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let records = read_metrics(&runs.join(&name).join(METRICS_FILE))?;
            Ok(RunHistory { name, records })
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Ablation table; every registered row appears, missing ones flagged.
pub fn ablation_table(results: &[AblationResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<26} {:<40} {:>7} {:>7}  status", "row", "setting", "top1", "top5");
    let registry = ablation_registry(&ExperimentConfig::desk());
    let mut listed = Vec::new();
    let mut group = "";
    for row in &registry {
        if row.group != group {
            group = row.group;
            let _ = writeln!(s, "-- {group}");
        }
        let label = row.label();
        match results.iter().find(|r| r.label == label) {
            Some(r) => {
                let status = r.error.as_deref().map_or("ok".to_string(), |e| format!("FAILED: {e}"));
                let _ = writeln!(
                    s,
                    "{:<26} {:<40} {:>7} {:>7}  {}",
                    label,
                    r.description,
                    pct(r.top1),
                    pct(r.top5),
                    status
                );
            }
            None => {
                let _ = writeln!(s, "{:<26} {:<40} {:>7} {:>7}  MISSING", label, row.description, "-", "-");
            }
        }
        listed.push(label);
    }
    for r in results.iter().filter(|r| !listed.contains(&r.label)) {
        let _ = writeln!(s, "{:<26} {:<40} {:>7} {:>7}  unregistered", r.label, r.description, pct(r.top1), pct(r.top5));
    }
    s
}

pub fn runs_table(runs: &[RunHistory]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<18} {:>6} {:>10} {:>10} {:>10}", "run", "epochs", "final val", "best val", "train");
    for run in runs {
        let val = run.curve("val");
        let train = run.curve("train");
        let last = |c: &[(f64, f64)]| c.last().map(|p| p.1);
        let best = val.iter().map(|p| p.1).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        let _ = writeln!(
            s,
            "{:<18} {:>6} {:>10} {:>10} {:>10}",
            run.name,
            train.len().max(val.len()),
            pct(last(&val)),
            pct(best),
            pct(last(&train))
        );
    }
    s
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Line plot of top-1 (0..1) against epoch.
pub fn svg_plot(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, left, right, top, bottom) = (560.0, 340.0, 50.0, 150.0, 30.0, 40.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let max_x = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.0))
        .fold(1.0f64, f64::max);
    let sx = |x: f64| left + pw * x / max_x;
    let sy = |y: f64| top + ph * (1.0 - y.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">{}</text>"#, escape(title));
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{py:.1}" x2="{x2:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{tx}" y="{ty:.1}" text-anchor="end">{v}</text>"##,
            py = sy(y),
            x2 = left + pw,
            tx = left - 4.0,
            ty = sy(y) + 4.0,
            v = (y * 100.0).round()
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{b:.1}" x2="{r:.1}" y2="{b:.1}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{b:.1}" stroke="black"/>"#,
        b = top + ph,
        r = left + pw
    );
    let _ = writeln!(
        s,
        r#"<text x="{x:.1}" y="{y:.1}" text-anchor="middle">epoch (0..{max_x})</text><text x="12" y="{my:.1}" transform="rotate(-90 12 {my:.1})" text-anchor="middle">top-1 %</text>"#,
        x = left + pw / 2.0,
        y = h - 8.0,
        my = top + ph / 2.0
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 * i as f64 + 6.0;
        let _ = writeln!(
            s,
            r#"<line x1="{x0:.1}" y1="{ly:.1}" x2="{x1:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{tx:.1}" y="{ty:.1}">{}</text>"#,
            escape(name),
            x0 = left + pw + 10.0,
            x1 = left + pw + 24.0,
            tx = left + pw + 28.0,
            ty = ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Builds the report without writing anything.
pub fn build_report(dir: &Path) -> Result<Report> {
    let ablation = read_ablation(dir)?;
    let runs = read_runs(dir)?;
    if ablation.is_none() && runs.is_empty() {
        return Ok(Report {
            text: NO_RUNS.to_string(),
            plots: Vec::new(),
        });
    }
    let mut text = String::new();
    if let Some(rows) = &ablation {
        text.push_str("== ablations (validation accuracy, %) ==\n");
        text.push_str(&ablation_table(rows));
        text.push('\n');
    }
    let mut plots = Vec::new();
    if !runs.is_empty() {
        text.push_str("== runs ==\n");
        text.push_str(&runs_table(&runs));
        let all: Vec<(String, Vec<(f64, f64)>)> = runs.iter().map(|r| (r.name.clone(), r.curve("val"))).collect();
        plots.push(("val_top1.svg".to_string(), svg_plot("validation top-1", &all)));
        for run in &runs {
            let series = vec![("train".to_string(), run.curve("train")), ("val".to_string(), run.curve("val"))];
            plots.push((format!("{}.svg", run.name), svg_plot(&run.name, &series)));
        }
        text.push_str(&format!("plots: {}\n", plots.iter().map(|p| p.0.as_str()).collect::<Vec<_>>().join(", ")));
    }
    Ok(Report { text, plots })
}

/// Builds the report and writes `report.txt` plus the plots under `dir/report/`.
pub fn write_report(dir: &Path) -> Result<Report> {
    let report = build_report(dir)?;
    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.txt"), &report.text)?;
    for (name, svg) in &report.plots {
        fs::write(out.join(name), svg)?;
    }
    Ok(report)
}
