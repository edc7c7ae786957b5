//! Success-rate metric and report aggregation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::world::MAX_HOPS;

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fraction of expected keywords contained in the answer, after collapsing
/// whitespace in both.
pub fn evaluate_sr(answer: &str, expected_keywords: &[String]) -> f64 {
    if expected_keywords.is_empty() {
        return 0.0;
    }
    let answer = normalize(answer);
    let hits = expected_keywords
        .iter()
        .filter(|k| answer.contains(&normalize(k)))
        .count();
    hits as f64 / expected_keywords.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub hops: u8,
    pub task_type: String,
    pub answer: Option<String>,
    pub sr: f64,
    /// All keywords present.
    pub passed: bool,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_path: Option<String>,
}

/// One column of the results table.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Cell {
    pub tasks: usize,
    pub passed: usize,
    /// Share of tasks with every keyword present.
    pub pass_rate: f64,
    /// Mean fractional keyword score.
    pub mean_sr: f64,
}

impl Cell {
    fn of<'a>(results: impl IntoIterator<Item = &'a TaskResult>) -> Cell {
        let mut cell = Cell::default();
        let mut sr_sum = 0.0;
        for r in results {
            cell.tasks += 1;
            cell.passed += usize::from(r.passed);
            sr_sum += r.sr;
        }
        if cell.tasks > 0 {
            cell.pass_rate = cell.passed as f64 / cell.tasks as f64;
            cell.mean_sr = sr_sum / cell.tasks as f64;
        }
        cell
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    /// Multi-hop tasks by hop count, 1 through 5.
    pub hops: Vec<Cell>,
    pub knowledge: Cell,
    pub all: Cell,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub tasks: Vec<TaskResult>,
}

impl RunReport {
    pub fn from_results(strategy: &str, tasks: Vec<TaskResult>) -> Self {
        let hops = (1..=MAX_HOPS as u8)
            .map(|h| Cell::of(tasks.iter().filter(|t| t.task_type != crate::world::TASK_KNOWLEDGE && t.hops == h)))
            .collect();
        let knowledge = Cell::of(tasks.iter().filter(|t| t.task_type == crate::world::TASK_KNOWLEDGE));
        let all = Cell::of(&tasks);
        let prompt_tokens = tasks.iter().map(|t| t.prompt_tokens).sum();
        let completion_tokens = tasks.iter().map(|t| t.completion_tokens).sum();
        RunReport {
            strategy: strategy.to_string(),
            hops,
            knowledge,
            all,
            prompt_tokens,
            completion_tokens,
            total_tokens: prompt_tokens + completion_tokens,
            tasks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub runs: Vec<RunReport>,
}

fn pct(cell: &Cell) -> String {
    if cell.tasks == 0 {
        "-".into()
    } else {
        format!("{:.2}", cell.pass_rate * 100.0)
    }
}

/// Aligned text table: one row per strategy, pass rates in percent.
pub fn render_table(report: &BenchReport) -> String {
    let mut header: Vec<String> = vec!["strategy".into()];
    header.extend((1..=MAX_HOPS).map(|h| format!("{h}-hop")));
    header.extend(["knowledge", "all", "mean_sr", "tokens"].map(String::from));
    let mut rows = vec![header];
    for run in &report.runs {
        let mut row = vec![run.strategy.clone()];
        row.extend(run.hops.iter().map(pct));
        row.push(pct(&run.knowledge));
        row.push(pct(&run.all));
        row.push(format!("{:.4}", run.all.mean_sr));
        row.push(run.total_tokens.to_string());
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn emit_report(report: &BenchReport, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    std::fs::write(dir.join("report.txt"), render_table(report))
}
