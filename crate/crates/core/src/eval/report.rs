use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{RunGrid, Summary};
use crate::error::{RamerError, Result};
use crate::pipeline::MissingCondition;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

fn columns() -> Vec<String> {
    MissingCondition::GRID
        .iter()
        .map(|c| c.code())
        .chain(std::iter::once("avg".to_string()))
        .collect()
}

fn cells(grid: &RunGrid) -> Vec<Option<Summary>> {
    MissingCondition::GRID
        .iter()
        .map(|c| grid.cell(*c))
        .chain(std::iter::once(grid.avg()))
        .collect()
}

/// Markdown table: spec, run count, then WA/UA per condition and Avg.
/// Cells read `mean ± std`.
pub fn render_markdown(grids: &[RunGrid]) -> String {
    let mut out = String::from("| Spec | Runs |");
    for c in columns() {
        let label = if c == "avg" { "Avg".to_string() } else { c };
        let _ = write!(out, " {label} WA | {label} UA |");
    }
    out.push('\n');
    out.push_str("|---|---:|");
    out.push_str(&"---:|".repeat(14));
    out.push('\n');
    for g in grids {
        let _ = write!(out, "| {} | {} |", g.spec, g.run_count());
        for cell in cells(g) {
            match cell {
                Some(s) => {
                    let _ = write!(
                        out,
                        " {:.2} ± {:.2} | {:.2} ± {:.2} |",
                        s.wa_mean, s.wa_std, s.ua_mean, s.ua_std
                    );
                }
                None => out.push_str(" - | - |"),
            }
        }
        out.push('\n');
    }
    out
}

fn csv_header() -> String {
    let mut cols = vec!["spec".to_string(), "runs".to_string()];
    for suffix in ["", "_std"] {
        for c in columns() {
            cols.push(format!("{c}_wa{suffix}"));
            cols.push(format!("{c}_ua{suffix}"));
        }
    }
    cols.join(",")
}

/// CSV with means followed by standard deviations, two decimals.
pub fn render_csv(grids: &[RunGrid]) -> String {
    let mut out = csv_header();
    out.push('\n');
    for g in grids {
        let cells = cells(g);
        let mut fields = vec![g.spec.replace(',', ";"), g.run_count().to_string()];
        for std in [false, true] {
            for cell in &cells {
                match cell {
                    Some(s) if std => {
                        fields.extend([format!("{:.2}", s.wa_std), format!("{:.2}", s.ua_std)])
                    }
                    Some(s) => {
                        fields.extend([format!("{:.2}", s.wa_mean), format!("{:.2}", s.ua_mean)])
                    }
                    None => fields.extend([String::new(), String::new()]),
                }
            }
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Parsed CSV row: spec name, run count and the numeric fields in column
/// order (`None` for empty cells).
pub type CsvRow = (String, usize, Vec<Option<f64>>);

pub fn parse_csv_report(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    let bad = |line: usize, msg: String| RamerError::Parse {
        path: "<csv report>".into(),
        line,
        msg,
    };
    if lines.next() != Some(csv_header().as_str()) {
        return Err(bad(1, "unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 30 {
            return Err(bad(
                i + 2,
                format!("expected 30 fields, found {}", fields.len()),
            ));
        }
        let runs = fields[1].parse().map_err(|e| bad(i + 2, format!("{e}")))?;
        let values = fields[2..]
            .iter()
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse().map(Some)
                }
            })
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(i + 2, format!("{e}")))?;
        rows.push((fields[0].to_string(), runs, values));
    }
    Ok(rows)
}

pub fn emit_report(grids: &[RunGrid], format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Markdown => render_markdown(grids),
        ReportFormat::Csv => render_csv(grids),
    };
    fs::write(path, text)?;
    Ok(())
}
