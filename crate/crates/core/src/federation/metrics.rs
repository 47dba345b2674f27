use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const METRICS_HEADER: [&str; 11] = [
    "round",
    "client_id",
    "split",
    "accuracy",
    "loss_wce",
    "loss_w",
    "loss_p",
    "beta_certain_mean",
    "beta_uncertain_mean",
    "relabel_count",
    "relabel_precision",
];

/// Client id used by aggregate rows.
pub const AGGREGATE_CLIENT: i64 = -1;

pub const SPLIT_LOCAL: &str = "local_test";
pub const SPLIT_POOLED: &str = "pooled_test";

/// One line of `metrics.csv`. `None` is written as an empty field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub client_id: i64,
    pub split: String,
    pub accuracy: Option<f64>,
    pub loss_wce: Option<f64>,
    pub loss_w: Option<f64>,
    pub loss_p: Option<f64>,
    pub beta_certain_mean: Option<f64>,
    pub beta_uncertain_mean: Option<f64>,
    pub relabel_count: Option<usize>,
    pub relabel_precision: Option<f64>,
}

impl MetricsRow {
    pub fn empty(round: usize, client_id: i64, split: &str) -> Self {
        Self {
            round,
            client_id,
            split: split.to_string(),
            accuracy: None,
            loss_wce: None,
            loss_w: None,
            loss_p: None,
            beta_certain_mean: None,
            beta_uncertain_mean: None,
            relabel_count: None,
            relabel_precision: None,
        }
    }

    pub fn is_aggregate(&self) -> bool {
        self.client_id == AGGREGATE_CLIENT
    }
}

/// Streams rows as CSV, flushing after each batch so a failed run keeps
/// what it logged.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(METRICS_HEADER).map_err(csv_io)?;
        Ok(Self { inner })
    }

    pub fn write_rows(&mut self, rows: &[MetricsRow]) -> Result<()> {
        for r in rows {
            self.inner.serialize(r).map_err(csv_io)?;
        }
        self.inner.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_io(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}

/// Parses a metrics file written by [`MetricsWriter`].
pub fn read_metrics(path: &std::path::Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_io)?;
    let headers = reader.headers().map_err(csv_io)?.clone();
    if headers.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(crate::Error::Csv {
            line: 1,
            msg: format!("unexpected metrics header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize().enumerate() {
        rows.push(rec.map_err(|e| crate::Error::Csv {
            line: i + 2,
            msg: e.to_string(),
        })?);
    }
    Ok(rows)
}
