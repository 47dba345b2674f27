use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::config::ExperimentConfig;
use super::summary::{emit_summary, write_summary};
use crate::data::{
    corrupt_features, dirichlet_partition, generate_synthetic, inject_label_noise, load_embeddings_csv, DataSnapshot,
    Dataset, Partition, SyntheticSpec,
};
use crate::error::Result;
use crate::federation::{Federation, MetricsRow, MetricsWriter};
use crate::numcore::Rng;

const STREAM_DATA: u64 = 101;
const STREAM_NOISE: u64 = 102;
const STREAM_CORRUPT: u64 = 103;
const STREAM_PARTITION: u64 = 104;

pub fn synthetic_spec(cfg: &ExperimentConfig) -> SyntheticSpec {
    SyntheticSpec {
        classes: cfg.classes,
        dim: cfg.feature_dim,
        per_class: cfg.per_class,
        separation: cfg.separation,
        spread: cfg.spread,
    }
}

/// Loads or generates the dataset, injects label noise and feature
/// corruption, and splits it across clients.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, Partition)> {
    let seed = cfg.seed;
    let mut ds = match &cfg.csv_path {
        Some(path) => load_embeddings_csv(Path::new(path))?,
        None => generate_synthetic(&synthetic_spec(cfg), &mut Rng::stream(seed, &[STREAM_DATA]))?,
    };
    if cfg.noise_rate > 0.0 {
        ds = inject_label_noise(&ds, cfg.noise_rate, &mut Rng::stream(seed, &[STREAM_NOISE]))?;
    }
    if cfg.corruption_rate > 0.0 {
        ds = corrupt_features(
            &ds,
            cfg.corruption_rate,
            cfg.corruption_severity,
            &mut Rng::stream(seed, &[STREAM_CORRUPT]),
        )?;
    }
    let partition = dirichlet_partition(
        &ds.clean_labels,
        ds.classes,
        cfg.client_count,
        cfg.dirichlet_alpha,
        &mut Rng::stream(seed, &[STREAM_PARTITION]),
    )?;
    Ok((ds, partition))
}

pub fn build_federation(cfg: &ExperimentConfig) -> Result<Federation> {
    let (ds, partition) = prepare_data(cfg)?;
    let dims = cfg.dims(ds.dim(), ds.classes);
    Federation::new(ds, &partition, dims, cfg.federation())
}

/// Runs one experiment in memory and returns every metrics row.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let mut fed = build_federation(cfg)?;
    let mut rows = Vec::new();
    fed.run(cfg.rounds, |r| {
        rows.extend_from_slice(r);
        Ok(())
    })?;
    Ok(rows)
}

/// Runs one experiment into `out`: resolved config echo, data snapshot,
/// streamed metrics, a one-cell summary and, if asked, a checkpoint.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let config_value = serde_json::to_value(cfg)?;
    std::fs::write(out.join("resolved_config.json"), serde_json::to_string_pretty(&config_value)? + "\n")?;

    let (ds, partition) = prepare_data(cfg)?;
    let snapshot = DataSnapshot::new(cfg.seed, config_value.clone(), &ds, &partition);
    std::fs::write(out.join("data_snapshot.json"), serde_json::to_string(&snapshot)? + "\n")?;

    let dims = cfg.dims(ds.dim(), ds.classes);
    let mut fed = Federation::new(ds, &partition, dims, cfg.federation())?;
    let mut writer = MetricsWriter::new(BufWriter::new(File::create(out.join("metrics.csv"))?))?;
    fed.run(cfg.rounds, |rows| writer.write_rows(rows))?;
    drop(writer);

    if cfg.checkpoint {
        let mut doc = serde_json::to_value(fed.checkpoint())?;
        if let serde_json::Value::Object(map) = &mut doc {
            map.insert("config".into(), config_value);
        }
        std::fs::write(out.join("checkpoint.json"), serde_json::to_string(&doc)? + "\n")?;
    }
    write_summary(&out.join("summary.csv"), &emit_summary(&[out.to_path_buf()]))?;
    Ok(())
}
