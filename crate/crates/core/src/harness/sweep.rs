use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::Value;

use super::config::{from_document, parse_sweep_values, resolve_document, ExperimentConfig};
use super::run::run_to_dir;
use super::summary::{emit_summary, write_summary, SummaryTable};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedRun {
    /// Directory name under `<out>/runs`.
    pub name: String,
    pub config: ExperimentConfig,
}

fn label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Cartesian product of every `KEY=[a,b,..]` list (keys in the order
/// given), times `seeds` consecutive seeds starting at the resolved seed.
pub fn plan_sweep(config: Option<&Path>, sets: &[String], seeds: usize) -> Result<Vec<PlannedRun>> {
    if seeds == 0 {
        return Err(Error::Config {
            key: "--seeds".into(),
            msg: "value 0 outside accepted range [1,inf)".into(),
        });
    }
    let mut axes: Vec<(String, Vec<Value>)> = Vec::new();
    for s in sets {
        let (key, raw) = s.split_once('=').ok_or_else(|| Error::Config {
            key: s.clone(),
            msg: "expected KEY=VALUE".into(),
        })?;
        let values = parse_sweep_values(raw);
        if values.is_empty() {
            return Err(Error::Config {
                key: key.into(),
                msg: "empty sweep list".into(),
            });
        }
        axes.push((key.trim().to_string(), values));
    }

    let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for (key, values) in &axes {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }

    let mut runs = Vec::new();
    for combo in combos {
        let base = from_document(resolve_document(config, &combo)?)?;
        let swept: Vec<String> = combo
            .iter()
            .filter(|(k, _)| axes.iter().any(|(a, vs)| a == k && vs.len() > 1))
            .map(|(k, v)| format!("{k}={}", label(v)))
            .collect();
        for i in 0..seeds {
            let mut cfg = base.clone();
            cfg.seed = base.seed + i as u64;
            let mut parts = swept.clone();
            parts.push(format!("seed={}", cfg.seed));
            runs.push(PlannedRun {
                name: parts.join(","),
                config: cfg,
            });
        }
    }
    Ok(runs)
}

/// Runs every planned experiment in parallel under `<out>/runs/` and writes
/// `<out>/summary.csv`. The summary is written even when some runs fail;
/// their cells read `absent`.
pub fn run_sweep(runs: &[PlannedRun], out: &Path) -> Result<SummaryTable> {
    std::fs::create_dir_all(out)?;
    let dirs: Vec<PathBuf> = runs.iter().map(|r| out.join("runs").join(&r.name)).collect();
    let results: Vec<Result<()>> = runs
        .par_iter()
        .zip(&dirs)
        .map(|(r, d)| run_to_dir(&r.config, d))
        .collect();
    let table = emit_summary(&dirs);
    write_summary(&out.join("summary.csv"), &table)?;
    let failures: Vec<String> = runs
        .iter()
        .zip(results)
        .filter_map(|(r, res)| res.err().map(|e| format!("{}: {e}", r.name)))
        .collect();
    if failures.is_empty() {
        Ok(table)
    } else {
        Err(Error::Protocol(format!("{} run(s) failed: {}", failures.len(), failures.join("; "))))
    }
}
