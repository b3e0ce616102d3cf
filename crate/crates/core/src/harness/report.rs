//! Aggregated results in the shape of a returns table, and their renderings.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackKind;
use crate::error::{Error, Result};

use super::mean_std;

pub const AVERAGE: &str = "Average";
/// Cells within this fraction of a column's best are highlighted.
pub const BOLD_WITHIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub index: usize,
    pub seed: u64,
    /// One cell per report column (same order), mean and std over episodes.
    pub cells: Vec<Cell>,
    /// Set when the run could not be completed; `cells` is then empty.
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub env: String,
    pub transform: String,
    pub mode: String,
    pub eps: f64,
    /// Report columns in canonical order (no Average).
    pub columns: Vec<String>,
    pub runs: Vec<RunResult>,
    pub master_seed: u64,
    pub version: String,
    /// Columns whose attack is a desk-scale simplification.
    pub simplified: Vec<String>,
}

/// Canonical column position: Natural, Random, ActionDiff, MinQ, RS, PAAD.
pub fn column_rank(name: &str) -> usize {
    AttackKind::ALL
        .iter()
        .position(|k| k.column() == name)
        .unwrap_or(AttackKind::ALL.len())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl EvalReport {
    fn attack_columns(&self) -> Vec<usize> {
        (0..self.columns.len())
            .filter(|&i| self.columns[i] != AttackKind::None.column())
            .collect()
    }

    pub fn has_average(&self) -> bool {
        !self.attack_columns().is_empty()
    }

    fn ok_runs(&self) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(|r| r.failed.is_none())
    }

    /// Per-run mean over the attack columns, Natural excluded.
    pub fn run_average(&self, run: &RunResult) -> Option<f64> {
        let cols = self.attack_columns();
        if cols.is_empty() || run.failed.is_some() {
            return None;
        }
        Some(cols.iter().map(|&c| run.cells[c].mean).sum::<f64>() / cols.len() as f64)
    }

    pub fn run_averages(&self) -> Vec<f64> {
        self.ok_runs().filter_map(|r| self.run_average(r)).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Run means of one column, failed runs skipped.
    pub fn column_means(&self, name: &str) -> Vec<f64> {
        match self.column_index(name) {
            Some(c) => self.ok_runs().map(|r| r.cells[c].mean).collect(),
            None => Vec::new(),
        }
    }

    /// Mean and std across runs of the run means, per column, then Average.
    pub fn summary(&self) -> Vec<(String, Cell)> {
        let mut out: Vec<(String, Cell)> = self
            .columns
            .iter()
            .map(|c| {
                let (mean, std) = mean_std(&self.column_means(c));
                (c.clone(), Cell { mean, std })
            })
            .collect();
        if self.has_average() {
            let (mean, std) = mean_std(&self.run_averages());
            out.push((AVERAGE.to_string(), Cell { mean, std }));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Table,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "table" | "text" | "text-table" => Ok(Self::Table),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// Columns shared by a set of reports: the union in canonical order.
fn union_columns(reports: &[EvalReport]) -> (Vec<String>, bool) {
    let mut cols: Vec<String> = Vec::new();
    for r in reports {
        for c in &r.columns {
            if !cols.contains(c) {
                cols.push(c.clone());
            }
        }
    }
    if reports.is_empty() {
        cols = AttackKind::ALL.iter().map(|k| k.column().to_string()).collect();
    }
    cols.sort_by_key(|c| column_rank(c));
    let avg = reports.is_empty() || reports.iter().any(|r| r.has_average());
    (cols, avg)
}

fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

/// Renders one or more reports (one row group per report).
pub fn report_render(reports: &[EvalReport], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(reports)?),
        ReportFormat::Csv => Ok(render_csv(reports)),
        ReportFormat::Table => Ok(render_table(reports)),
    }
}

/// One row per run plus a `mean` row per report; every column contributes
/// `<col>_mean,<col>_std`.
fn render_csv(reports: &[EvalReport]) -> String {
    let (cols, avg) = union_columns(reports);
    let mut names = cols.clone();
    if avg {
        names.push(AVERAGE.into());
    }
    let mut out = String::from("name,transform,mode,eps,run,seed,status");
    for c in &names {
        let _ = write!(out, ",{c}_mean,{c}_std");
    }
    out.push('\n');
    for r in reports {
        let prefix = format!("{},{},{},{}", r.name, r.transform, r.mode, r.eps);
        for run in &r.runs {
            let status = if run.failed.is_some() { "failed" } else { "ok" };
            let _ = write!(out, "{prefix},{},{},{status}", run.index, run.seed);
            for c in &cols {
                match (r.column_index(c), run.failed.is_none()) {
                    (Some(i), true) => {
                        let _ = write!(out, ",{},{}", fmt_num(run.cells[i].mean), fmt_num(run.cells[i].std));
                    }
                    _ => out.push_str(",,"),
                }
            }
            if avg {
                match r.run_average(run) {
                    Some(a) => {
                        let _ = write!(out, ",{},", fmt_num(a));
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        if !r.runs.is_empty() {
            let summary = r.summary();
            let _ = write!(out, "{prefix},mean,{},ok", r.master_seed);
            for c in &names {
                match summary.iter().find(|(n, _)| n == c) {
                    Some((_, cell)) => {
                        let _ = write!(out, ",{},{}", fmt_num(cell.mean), fmt_num(cell.std));
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Fixed-width table, one row per report, `mean ± std` cells; a `*` marks
/// cells within 5% of the best value in their column.
fn render_table(reports: &[EvalReport]) -> String {
    let (cols, avg) = union_columns(reports);
    let mut names = cols;
    if avg {
        names.push(AVERAGE.into());
    }
    let summaries: Vec<Vec<(String, Cell)>> = reports.iter().map(|r| r.summary()).collect();
    let value = |ri: usize, c: &str| summaries[ri].iter().find(|(n, _)| n == c).map(|(_, cell)| *cell);
    let best: Vec<f64> = names
        .iter()
        .map(|c| {
            (0..reports.len())
                .filter_map(|ri| value(ri, c).map(|v| v.mean))
                .filter(|m| m.is_finite())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();

    let mut header = vec!["Env".to_string(), "Model".to_string()];
    header.extend(names.iter().cloned());
    let mut rows = vec![header];
    for (ri, r) in reports.iter().enumerate() {
        let mut row = vec![r.env.clone(), r.name.clone()];
        for (ci, c) in names.iter().enumerate() {
            row.push(match value(ri, c) {
                Some(cell) if cell.mean.is_finite() => {
                    let near = (best[ci] - cell.mean).abs() <= BOLD_WITHIN * best[ci].abs();
                    format!("{:.1} ± {:.1}{}", cell.mean, cell.std, if near { " *" } else { "" })
                }
                _ => "-".into(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
        .collect();
    let line = |r: &Vec<String>| {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", cells.join(" | "))
    };
    let mut out = line(&rows[0]);
    out.push_str(&format!(
        "|{}|\n",
        widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")
    ));
    for r in &rows[1..] {
        out.push_str(&line(r));
    }
    out
}
