//! Scenario-grid and ablation tables.
//!
//! Grid rows follow the order of [`scenario_grid`]: groups of descending
//! total missing rate, text rate ascending inside a group, complete
//! modalities last. Rates of 0 are printed as `-`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::corruption::{scenario_grid, MissingRates};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

/// Name of the per-run metrics file read by [`collect_reports`].
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub scenario: MissingRates,
    pub report: Option<MetricsReport>,
}

/// Merges reports into the 15-row grid. Equal duplicates collapse; duplicates
/// with different metrics are an error listing every conflicting scenario.
pub fn merge_grid(reports: &[MetricsReport]) -> Result<Vec<GridRow>> {
    let mut rows: Vec<GridRow> = scenario_grid()
        .into_iter()
        .map(|scenario| GridRow { scenario, report: None })
        .collect();
    let mut conflicts = Vec::new();
    for r in reports {
        let Some(row) = rows.iter_mut().find(|row| row.scenario == r.scenario) else {
            return Err(Error::invalid(format!("scenario {} is not part of the grid", r.scenario)));
        };
        match &row.report {
            None => row.report = Some(r.clone()),
            Some(existing) if existing.same_metrics(r) => {}
            Some(_) => {
                if !conflicts.contains(&r.scenario) {
                    conflicts.push(r.scenario);
                }
            }
        }
    }
    if !conflicts.is_empty() {
        let list: Vec<String> = conflicts.iter().map(|s| s.tag()).collect();
        return Err(Error::invalid(format!(
            "conflicting results for scenario(s): {}",
            list.join(", ")
        )));
    }
    Ok(rows)
}

fn rate_cell(rate: u8) -> String {
    if rate == 0 {
        "-".into()
    } else {
        rate.to_string()
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn metric_cells(report: &Option<MetricsReport>) -> [String; 3] {
    match report {
        Some(r) => [pct(r.acc), pct(r.macro_f1), pct(r.auc)],
        None => [String::new(), String::new(), String::new()],
    }
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:>w$}", w = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

/// Aligned text table. The missing-rate label appears on the first row of
/// each group.
pub fn render_grid(rows: &[GridRow]) -> String {
    let mut table = vec![
        ["Missing Rate (%)", "Text", "Image", "ACC", "M-F1", "AUC"]
            .map(String::from)
            .to_vec(),
    ];
    let mut last_total = None;
    for row in rows {
        let total = row.scenario.total();
        let label = if Some(total) == last_total {
            String::new()
        } else if total == 0 {
            "-".into()
        } else {
            format!("↓{total}")
        };
        last_total = Some(total);
        let [acc, f1, auc] = metric_cells(&row.report);
        table.push(vec![
            label,
            rate_cell(row.scenario.text_rate),
            rate_cell(row.scenario.image_rate),
            acc,
            f1,
            auc,
        ]);
    }
    align(&table)
}

/// Delimited table with one complete record per row; absent metrics are empty.
pub fn render_grid_delimited(rows: &[GridRow], delimiter: char) -> String {
    let d = delimiter.to_string();
    let mut out = ["missing_rate", "text", "image", "acc", "macro_f1", "auc"].join(&d);
    out.push('\n');
    for row in rows {
        let [acc, f1, auc] = metric_cells(&row.report);
        let cells = [
            row.scenario.total().to_string(),
            row.scenario.text_rate.to_string(),
            row.scenario.image_rate.to_string(),
            acc,
            f1,
            auc,
        ];
        out.push_str(&cells.join(&d));
        out.push('\n');
    }
    out
}

/// Reads every report of the given run directories.
pub fn collect_reports(dirs: &[PathBuf]) -> Result<Vec<MetricsReport>> {
    if dirs.is_empty() {
        return Err(Error::invalid("no run directories given"));
    }
    let mut all = Vec::new();
    for dir in dirs {
        all.extend(read_reports(&dir.join(METRICS_FILE))?);
    }
    Ok(all)
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}

pub fn write_reports(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Invariant(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One row of an ablation comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub acc: f64,
    pub macro_f1: f64,
    pub auc: f64,
}

fn signed(delta: f64) -> String {
    let points = delta * 100.0;
    if points.abs() < 0.005 {
        "+0.00".into()
    } else {
        format!("{points:+.2}")
    }
}

/// Aligned table of each variant with signed deltas (in points) against the
/// first row, which is the base run.
pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut table = vec![["Variant", "ACC", "ΔACC", "M-F1", "ΔM-F1", "AUC", "ΔAUC"]
        .map(String::from)
        .to_vec()];
    if let Some(base) = rows.first() {
        for r in rows {
            table.push(vec![
                r.label.clone(),
                pct(r.acc),
                signed(r.acc - base.acc),
                pct(r.macro_f1),
                signed(r.macro_f1 - base.macro_f1),
                pct(r.auc),
                signed(r.auc - base.auc),
            ]);
        }
    }
    align(&table)
}

pub fn render_ablation_delimited(rows: &[AblationRow], delimiter: char) -> String {
    let d = delimiter.to_string();
    let mut out = ["variant", "acc", "d_acc", "macro_f1", "d_macro_f1", "auc", "d_auc"].join(&d);
    out.push('\n');
    if let Some(base) = rows.first() {
        for r in rows {
            let cells = [
                r.label.clone(),
                pct(r.acc),
                signed(r.acc - base.acc),
                pct(r.macro_f1),
                signed(r.macro_f1 - base.macro_f1),
                pct(r.auc),
                signed(r.auc - base.auc),
            ];
            out.push_str(&cells.join(&d));
            out.push('\n');
        }
    }
    out
}
