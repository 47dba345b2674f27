use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{accuracy, local_train, ClientState, LocalReport, TrainConfig};
use super::metrics::{MetricsRow, AGGREGATE_CLIENT, SPLIT_LOCAL, SPLIT_POOLED};
use super::params::{ModelDims, ModelParams};
use super::prototypes::Prototypes;
use super::server::{aggregate, ClientUpdate, ServerState, Weighting};
use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::numcore::{MlpParams, Rng};
use crate::ue_block::UeParams;

const STREAM_INIT: u64 = 1;
const STREAM_ESTIMATOR: u64 = 2;
const STREAM_SELECT: u64 = 3;
const STREAM_TRAIN: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub seed: u64,
    /// Fraction of clients selected per round.
    pub participation: f64,
    pub weighting: Weighting,
    /// Send the global model to every client each round, not only the
    /// selected ones.
    pub broadcast_all: bool,
    /// Restore observed labels at the start of each round.
    pub reset_labels: bool,
    pub train: TrainConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            participation: 0.5,
            weighting: Weighting::DataSize,
            broadcast_all: false,
            reset_labels: false,
            train: TrainConfig::default(),
        }
    }
}

/// Number of clients selected per round: `⌈p·K⌉`, at least one.
pub fn selected_count(clients: usize, participation: f64) -> usize {
    ((participation * clients as f64 - 1e-9).ceil() as usize).clamp(1, clients.max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub round: usize,
    pub selected: Vec<usize>,
    pub reports: Vec<LocalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientCheckpoint {
    pub id: usize,
    pub estimator: MlpParams,
    /// Current training labels, 1-indexed.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub round: usize,
    pub global: Vec<f64>,
    pub prototypes: Prototypes,
    pub clients: Vec<ClientCheckpoint>,
}

/// Server plus clients over one dataset and partition.
pub struct Federation {
    pub cfg: FederationConfig,
    pub dataset: Dataset,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    template: ModelParams,
}

impl Federation {
    /// Every client starts from the same shared initialization and draws its
    /// own estimator.
    pub fn new(dataset: Dataset, partition: &Partition, dims: ModelDims, cfg: FederationConfig) -> Result<Self> {
        if dims.input != dataset.dim() || dims.classes != dataset.classes {
            return Err(Error::Protocol(format!(
                "model expects {} features and {} classes, dataset has {} and {}",
                dims.input,
                dims.classes,
                dataset.dim(),
                dataset.classes
            )));
        }
        if partition.train.is_empty() || partition.train.len() != partition.test.len() {
            return Err(Error::Partition("partition has no clients".into()));
        }
        let template = ModelParams::init(&dims, &mut Rng::stream(cfg.seed, &[STREAM_INIT]));
        let clients = partition
            .train
            .iter()
            .zip(&partition.test)
            .enumerate()
            .map(|(k, (train, test))| {
                let mut params = template.clone();
                params.ue.estimator.0 =
                    UeParams::init_estimator(&dims.ue(), &mut Rng::stream(cfg.seed, &[STREAM_ESTIMATOR, k as u64]));
                ClientState::new(k, train.clone(), test.clone(), &dataset, params)
            })
            .collect();
        let server = ServerState {
            round: 0,
            global: template.shared_vector(),
            prototypes: Prototypes::empty(dims.classes, dims.expr),
        };
        Ok(Self {
            cfg,
            dataset,
            server,
            clients,
            template,
        })
    }

    pub fn select_clients(&self, round: usize) -> Vec<usize> {
        let k = self.clients.len();
        let m = selected_count(k, self.cfg.participation);
        let mut rng = Rng::stream(self.cfg.seed, &[STREAM_SELECT, round as u64]);
        let mut picked = rng.sample_without_replacement(k, m);
        picked.sort_unstable();
        picked
    }

    /// Loads the global shared tensors into the receiving clients.
    pub fn broadcast(&mut self, selected: &[usize]) -> Result<()> {
        for c in self.clients.iter_mut() {
            if self.cfg.broadcast_all || selected.contains(&c.id) {
                c.params.load_shared(&self.server.global)?;
                if self.cfg.reset_labels {
                    c.reset_labels(&self.dataset);
                }
            }
        }
        Ok(())
    }

    /// Local training of the selected clients, in parallel. Reports come
    /// back in client-id order.
    pub fn train_clients(&mut self, round: usize, selected: &[usize]) -> Result<Vec<LocalReport>> {
        let seed = self.cfg.seed;
        let train = self.cfg.train;
        let ds = &self.dataset;
        let global = &self.server.prototypes;
        self.clients
            .par_iter_mut()
            .filter(|c| selected.contains(&c.id))
            .map(|c| {
                let mut rng = Rng::stream(seed, &[STREAM_TRAIN, round as u64, c.id as u64]);
                local_train(c, ds, global, &train, round, &mut rng)
            })
            .collect()
    }

    /// Replaces the global model and prototypes with the aggregate of the
    /// selected clients' uploads.
    pub fn aggregate(&mut self, selected: &[usize]) -> Result<()> {
        let updates: Vec<ClientUpdate> = self
            .clients
            .iter()
            .filter(|c| selected.contains(&c.id))
            .map(|c| ClientUpdate {
                client_id: c.id,
                samples: c.samples(),
                shared: c.params.shared_vector(),
                prototypes: c.prototypes.clone(),
            })
            .collect();
        let (global, prototypes) = aggregate(&self.server.prototypes, &updates, self.cfg.weighting)?;
        self.server.global = global;
        self.server.prototypes = prototypes;
        Ok(())
    }

    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let round = self.server.round + 1;
        let selected = self.select_clients(round);
        self.broadcast(&selected)?;
        let reports = self.train_clients(round, &selected)?;
        self.aggregate(&selected)?;
        self.server.round = round;
        Ok(RoundOutcome {
            round,
            selected,
            reports,
        })
    }

    /// The global shared tensors inside a full model.
    pub fn global_model(&self) -> Result<ModelParams> {
        let mut m = self.template.clone();
        m.load_shared(&self.server.global)?;
        Ok(m)
    }

    /// Per-client rows, the mean over clients, and the global model on the
    /// pooled test splits.
    pub fn evaluate(&self, round: usize, reports: &[LocalReport]) -> Result<Vec<MetricsRow>> {
        let accs: Vec<Option<f64>> = self
            .clients
            .par_iter()
            .map(|c| accuracy(&c.params, &self.dataset, &c.test))
            .collect::<Result<_>>()?;

        let mut rows = Vec::with_capacity(self.clients.len() + 2);
        for (c, acc) in self.clients.iter().zip(&accs) {
            let mut row = MetricsRow::empty(round, c.id as i64, SPLIT_LOCAL);
            row.accuracy = *acc;
            if let Some(r) = reports.iter().find(|r| r.client_id == c.id) {
                row.loss_wce = Some(r.loss_wce);
                row.loss_w = r.loss_w;
                row.loss_p = Some(r.loss_p);
                row.beta_certain_mean = r.beta_certain_mean;
                row.beta_uncertain_mean = r.beta_uncertain_mean;
                row.relabel_count = Some(r.relabel_count);
                row.relabel_precision = precision(r.relabel_correct, r.relabel_count);
            }
            rows.push(row);
        }

        let mut agg = MetricsRow::empty(round, AGGREGATE_CLIENT, SPLIT_LOCAL);
        agg.accuracy = mean(accs.iter().flatten().copied());
        agg.loss_wce = mean(reports.iter().map(|r| r.loss_wce));
        agg.loss_w = mean(reports.iter().filter_map(|r| r.loss_w));
        agg.loss_p = mean(reports.iter().map(|r| r.loss_p));
        agg.beta_certain_mean = mean(reports.iter().filter_map(|r| r.beta_certain_mean));
        agg.beta_uncertain_mean = mean(reports.iter().filter_map(|r| r.beta_uncertain_mean));
        if !reports.is_empty() {
            let count: usize = reports.iter().map(|r| r.relabel_count).sum();
            let correct: usize = reports.iter().map(|r| r.relabel_correct).sum();
            agg.relabel_count = Some(count);
            agg.relabel_precision = precision(correct, count);
        }
        rows.push(agg);

        let pooled_rows: Vec<usize> = self.clients.iter().flat_map(|c| c.test.iter().copied()).collect();
        let mut pooled = MetricsRow::empty(round, AGGREGATE_CLIENT, SPLIT_POOLED);
        pooled.accuracy = accuracy(&self.global_model()?, &self.dataset, &pooled_rows)?;
        rows.push(pooled);
        Ok(rows)
    }

    /// Evaluates the initial model as round 0, then runs `rounds` rounds,
    /// handing each round's rows to `sink` as soon as they exist.
    pub fn run(&mut self, rounds: usize, mut sink: impl FnMut(&[MetricsRow]) -> Result<()>) -> Result<()> {
        sink(&self.evaluate(self.server.round, &[])?)?;
        for _ in 0..rounds {
            let outcome = self.run_round()?;
            sink(&self.evaluate(outcome.round, &outcome.reports)?)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            round: self.server.round,
            global: self.server.global.clone(),
            prototypes: self.server.prototypes.clone(),
            clients: self
                .clients
                .iter()
                .map(|c| ClientCheckpoint {
                    id: c.id,
                    estimator: c.params.ue.estimator.0.clone(),
                    labels: c.labels.iter().map(|l| l + 1).collect(),
                })
                .collect(),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn precision(correct: usize, count: usize) -> Option<f64> {
    (count > 0).then(|| correct as f64 / count as f64)
}
