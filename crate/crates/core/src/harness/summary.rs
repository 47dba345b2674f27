use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use crate::error::Result;
use crate::federation::{read_metrics, Method, SPLIT_LOCAL};

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Absent,
    /// Accuracy in percent over `n` runs; `std` only when `n > 1`.
    Value { mean: f64, std: Option<f64>, n: usize },
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Absent => "absent".into(),
            Cell::Value { mean, std: None, .. } => format!("{mean:.2}"),
            Cell::Value { mean, std: Some(s), .. } => format!("{mean:.2}±{s:.2}"),
        }
    }
}

/// Rows are methods, columns are Dirichlet α ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryTable {
    pub alphas: Vec<f64>,
    pub rows: Vec<(Method, Vec<Cell>)>,
}

impl SummaryTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for a in &self.alphas {
            out.push_str(&format!(",alpha={a}"));
        }
        out.push('\n');
        for (m, cells) in &self.rows {
            out.push_str(m.name());
            for c in cells {
                out.push(',');
                out.push_str(&c.render());
            }
            out.push('\n');
        }
        out
    }

    pub fn cell(&self, method: Method, alpha: f64) -> Option<&Cell> {
        let col = self.alphas.iter().position(|&a| a == alpha)?;
        let (_, cells) = self.rows.iter().find(|(m, _)| *m == method)?;
        cells.get(col)
    }
}

/// Mean personalized accuracy of the last round, if the run completed.
pub fn final_accuracy(dir: &Path, cfg: &ExperimentConfig) -> Option<f64> {
    let rows = read_metrics(&dir.join("metrics.csv")).ok()?;
    rows.iter()
        .find(|r| r.is_aggregate() && r.split == SPLIT_LOCAL && r.round == cfg.rounds)
        .and_then(|r| r.accuracy)
}

fn read_config(dir: &Path) -> Option<ExperimentConfig> {
    let text = std::fs::read_to_string(dir.join("resolved_config.json")).ok()?;
    serde_json::from_str(&text).ok()
}

/// Groups run directories by `(method, α)` and reduces each group to
/// mean ± sample standard deviation over seeds. A group whose runs have no
/// final metrics is absent.
pub fn emit_summary(dirs: &[PathBuf]) -> SummaryTable {
    let runs: Vec<(Method, f64, Option<f64>)> = dirs
        .iter()
        .filter_map(|d| {
            let cfg = read_config(d)?;
            Some((cfg.method, cfg.dirichlet_alpha, final_accuracy(d, &cfg)))
        })
        .collect();
    let mut alphas: Vec<f64> = runs.iter().map(|r| r.1).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let mut methods: Vec<Method> = runs.iter().map(|r| r.0).collect();
    methods.sort();
    methods.dedup();

    let rows = methods
        .into_iter()
        .map(|m| {
            let cells = alphas
                .iter()
                .map(|&a| {
                    let vals: Vec<f64> = runs
                        .iter()
                        .filter(|r| r.0 == m && r.1 == a)
                        .filter_map(|r| r.2)
                        .map(|v| 100.0 * v)
                        .collect();
                    reduce(&vals)
                })
                .collect();
            (m, cells)
        })
        .collect();
    SummaryTable { alphas, rows }
}

fn reduce(vals: &[f64]) -> Cell {
    let n = vals.len();
    if n == 0 {
        return Cell::Absent;
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Cell::Value { mean, std, n }
}

pub fn write_summary(path: &Path, table: &SummaryTable) -> Result<()> {
    std::fs::write(path, table.to_csv())?;
    Ok(())
}
