use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use super::prototypes::{compute_prototypes, prototype_loss, PrototypeDistance, Prototypes};
use crate::data::Dataset;
use crate::ec_block::{
    argmax, ec_backward, ec_forward, label_propagate, one_hot, refine_labels, scores_to_labels, PropagationConfig,
    RefineConfig,
};
use crate::error::{Error, Result};
use crate::hypergraph::KernelConfig;
use crate::numcore::{Matrix, Parameters, Rng};
use crate::ue_block::{ue_backward, ue_forward, weight_reg_loss, weighted_ce_loss, WeightRegConfig};

/// Which parts of the method are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain cross-entropy plus prototype alignment.
    Baseline,
    /// Uncertainty estimation without the weight regularizer.
    UeNoW,
    /// Uncertainty estimation with the weight regularizer.
    Ue,
    /// Uncertainty estimation plus label refinement.
    UeEc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::UeNoW, Method::Ue, Method::UeEc];

    pub fn uses_uncertainty(self) -> bool {
        self != Method::Baseline
    }

    pub fn uses_weight_reg(self) -> bool {
        matches!(self, Method::Ue | Method::UeEc)
    }

    pub fn uses_relabel(self) -> bool {
        self == Method::UeEc
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::UeNoW => "ue_no_w",
            Method::Ue => "ue",
            Method::UeEc => "ue_ec",
        }
    }
}

/// Label propagation runs per training batch or once over the whole
/// client partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationScope {
    Batch,
    Partition,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub prototype_distance: PrototypeDistance,
    pub weight_reg: WeightRegConfig,
    pub ue_kernel: KernelConfig,
    pub propagation: PropagationConfig,
    pub refine: RefineConfig,
    pub propagation_scope: PropagationScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::UeEc,
            learning_rate: 0.1,
            batch_size: 32,
            local_epochs: 1,
            lambda1: 0.8,
            lambda2: 1.0,
            prototype_distance: PrototypeDistance::L1Mean,
            weight_reg: WeightRegConfig::default(),
            ue_kernel: KernelConfig::default(),
            propagation: PropagationConfig::default(),
            refine: RefineConfig::default(),
            propagation_scope: PropagationScope::Batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    /// Dataset row indices.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Current training labels, aligned with `train`.
    pub labels: Vec<usize>,
    pub params: ModelParams,
    /// Prototypes from the last local training.
    pub prototypes: Prototypes,
}

impl ClientState {
    pub fn new(id: usize, train: Vec<usize>, test: Vec<usize>, ds: &Dataset, params: ModelParams) -> Self {
        let labels = train.iter().map(|&i| ds.observed_labels[i]).collect();
        let prototypes = Prototypes::empty(ds.classes, params.ec.expr.output_dim());
        Self {
            id,
            train,
            test,
            labels,
            params,
            prototypes,
        }
    }

    pub fn samples(&self) -> usize {
        self.train.len()
    }

    pub fn reset_labels(&mut self, ds: &Dataset) {
        self.labels = self.train.iter().map(|&i| ds.observed_labels[i]).collect();
    }
}

/// Training statistics for one client over one round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalReport {
    pub client_id: usize,
    pub batches: usize,
    pub loss_wce: f64,
    pub loss_w: Option<f64>,
    pub loss_p: f64,
    pub beta_certain_mean: Option<f64>,
    pub beta_uncertain_mean: Option<f64>,
    pub relabel_count: usize,
    /// Changes whose new label is the clean label.
    pub relabel_correct: usize,
}

#[derive(Default)]
struct Sums {
    batches: usize,
    wce: f64,
    w: f64,
    p: f64,
    beta_batches: usize,
    certain: f64,
    uncertain: f64,
    relabel_count: usize,
    relabel_correct: usize,
}

impl Sums {
    fn report(&self, client_id: usize, with_ue: bool) -> LocalReport {
        let mean = |s: f64, n: usize| if n > 0 { Some(s / n as f64) } else { None };
        let b = self.batches.max(1) as f64;
        LocalReport {
            client_id,
            batches: self.batches,
            loss_wce: self.wce / b,
            loss_w: if with_ue { mean(self.w, self.batches) } else { None },
            loss_p: self.p / b,
            beta_certain_mean: if with_ue { mean(self.certain, self.beta_batches) } else { None },
            beta_uncertain_mean: if with_ue { mean(self.uncertain, self.beta_batches) } else { None },
            relabel_count: self.relabel_count,
            relabel_correct: self.relabel_correct,
        }
    }
}

/// Losses and gradient for one mini-batch.
#[derive(Clone, Debug)]
pub struct BatchStep {
    pub loss: f64,
    pub loss_wce: f64,
    pub loss_w: Option<f64>,
    pub loss_p: f64,
    pub beta: Vec<f64>,
    pub beta_means: Option<(f64, f64)>,
    pub grads: ModelParams,
}

/// Forward and backward pass of `L_WCE + λ1·L_W + λ2·L_P` on one batch.
pub fn batch_step(
    params: &ModelParams,
    x: &Matrix,
    labels: &[usize],
    global: &Prototypes,
    cfg: &TrainConfig,
) -> Result<BatchStep> {
    let (deep, backbone_cache) = params.backbone.forward(x)?;
    let (logits, e, ec_cache) = ec_forward(&deep, &params.ec)?;

    let ue = if cfg.method.uses_uncertainty() {
        Some(ue_forward(&deep, &params.ue, &cfg.ue_kernel)?)
    } else {
        None
    };
    let beta = match &ue {
        Some((out, _)) => out.beta.clone(),
        None => vec![0.0; x.rows()],
    };

    let wce = weighted_ce_loss(&logits, labels, &beta)?;
    let reg = ue.as_ref().map(|_| weight_reg_loss(&beta, &cfg.weight_reg));
    let lambda1 = if cfg.method.uses_weight_reg() { cfg.lambda1 } else { 0.0 };
    let proto = prototype_loss(&e, labels, global, cfg.prototype_distance)?;

    let loss_w = reg.as_ref().map(|r| r.loss);
    let loss = wce.loss + lambda1 * loss_w.unwrap_or(0.0) + cfg.lambda2 * proto.loss;

    let grad_e = proto.grad_features.scale(cfg.lambda2);
    let (g_ec, mut g_deep) = ec_backward(&params.ec, &ec_cache, &wce.grad_logits, Some(&grad_e))?;
    let mut grads = params.zeros_like();
    grads.ec = g_ec;
    if let (Some((_, cache)), Some(r)) = (&ue, &reg) {
        let grad_beta: Vec<f64> = wce
            .grad_beta
            .iter()
            .zip(&r.grad_beta)
            .map(|(a, b)| a + lambda1 * b)
            .collect();
        let (g_ue, g_deep_ue) = ue_backward(&params.ue, cache, &grad_beta, None)?;
        g_deep.add_assign(&g_deep_ue)?;
        grads.ue = g_ue;
    }
    let (g_backbone, _) = params.backbone.backward(&backbone_cache, &g_deep)?;
    grads.backbone = g_backbone;

    Ok(BatchStep {
        loss,
        loss_wce: wce.loss,
        loss_w,
        loss_p: proto.loss,
        beta_means: reg.as_ref().map(|r| (r.certain_mean, r.uncertain_mean)),
        beta,
        grads,
    })
}

/// Shuffled mini-batches of positions into `0..n`.
pub fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn non_finite(client: usize, round: usize, what: &str, batch: usize, step: &BatchStep) -> Error {
    Error::NonFinite {
        client,
        round,
        detail: format!(
            "{what} in batch {batch}: loss={} wce={} w={:?} p={} beta_range=({}, {})",
            step.loss,
            step.loss_wce,
            step.loss_w,
            step.loss_p,
            step.beta.iter().cloned().fold(f64::INFINITY, f64::min),
            step.beta.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ),
    }
}

/// Runs the configured number of local epochs: SGD over shuffled batches,
/// then (for label refinement) a relabel pass after each epoch. Finishes by
/// recomputing local prototypes.
pub fn local_train(
    client: &mut ClientState,
    ds: &Dataset,
    global: &Prototypes,
    cfg: &TrainConfig,
    round: usize,
    rng: &mut Rng,
) -> Result<LocalReport> {
    let mut sums = Sums::default();
    for _ in 0..cfg.local_epochs {
        let plan = batches(client.train.len(), cfg.batch_size, rng);
        for (b, pos) in plan.iter().enumerate() {
            let rows: Vec<usize> = pos.iter().map(|&p| client.train[p]).collect();
            let x = ds.features.select_rows(&rows);
            let labels: Vec<usize> = pos.iter().map(|&p| client.labels[p]).collect();
            let step = batch_step(&client.params, &x, &labels, global, cfg)?;
            if !step.loss.is_finite() {
                return Err(non_finite(client.id, round, "loss", b, &step));
            }
            if !step.grads.all_finite() {
                return Err(non_finite(client.id, round, "gradient", b, &step));
            }
            client.params.axpy(-cfg.learning_rate, &step.grads)?;
            sums.batches += 1;
            sums.wce += step.loss_wce;
            sums.w += step.loss_w.unwrap_or(0.0);
            sums.p += step.loss_p;
            if let Some((c, u)) = step.beta_means {
                if c.is_finite() && u.is_finite() {
                    sums.beta_batches += 1;
                    sums.certain += c;
                    sums.uncertain += u;
                }
            }
        }
        if cfg.method.uses_relabel() {
            let groups = match cfg.propagation_scope {
                PropagationScope::Batch => plan,
                PropagationScope::Partition => vec![(0..client.train.len()).collect()],
            };
            for pos in &groups {
                relabel_group(client, ds, pos, cfg, &mut sums)?;
            }
        }
    }
    client.prototypes = local_prototypes(client, ds)?;
    Ok(sums.report(client.id, cfg.method.uses_uncertainty()))
}

/// Propagation, classifier argmax and the refinement rule on one group of
/// training positions. Updates the stored labels in place.
fn relabel_group(
    client: &mut ClientState,
    ds: &Dataset,
    pos: &[usize],
    cfg: &TrainConfig,
    sums: &mut Sums,
) -> Result<()> {
    let rows: Vec<usize> = pos.iter().map(|&p| client.train[p]).collect();
    let x = ds.features.select_rows(&rows);
    let original: Vec<usize> = pos.iter().map(|&p| client.labels[p]).collect();
    let deep = client.params.backbone.predict(&x)?;
    let (logits, e, _) = ec_forward(&deep, &client.params.ec)?;
    let (ue, _) = ue_forward(&deep, &client.params.ue, &cfg.ue_kernel)?;
    let y = one_hot(&original, ds.classes)?;
    let propagated = label_propagate(&e, &y, &cfg.propagation)?;
    let (_, l_prop) = scores_to_labels(&propagated);
    let (_, l_pred) = scores_to_labels(&logits);
    let refined = refine_labels(&ue.beta, &l_prop, &l_pred, &original, &cfg.refine)?;
    for change in &refined.changes {
        sums.relabel_count += 1;
        if ds.clean_labels[rows[change.index]] == change.new {
            sums.relabel_correct += 1;
        }
    }
    for (k, &p) in pos.iter().enumerate() {
        client.labels[p] = refined.labels[k];
    }
    Ok(())
}

/// Expression feature prototypes over the client's whole training split
/// using its current labels.
pub fn local_prototypes(client: &ClientState, ds: &Dataset) -> Result<Prototypes> {
    let x = ds.features.select_rows(&client.train);
    let e = expression_features(&client.params, &x)?;
    compute_prototypes(&e, &client.labels, ds.classes)
}

pub fn expression_features(params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    let deep = params.backbone.predict(x)?;
    let (_, e, _) = ec_forward(&deep, &params.ec)?;
    Ok(e)
}

pub fn predict(params: &ModelParams, x: &Matrix) -> Result<Vec<usize>> {
    let deep = params.backbone.predict(x)?;
    let (logits, _, _) = ec_forward(&deep, &params.ec)?;
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

/// Accuracy against clean labels on the given rows; `None` for no rows.
pub fn accuracy(params: &ModelParams, ds: &Dataset, rows: &[usize]) -> Result<Option<f64>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let pred = predict(params, &ds.features.select_rows(rows))?;
    let hits = pred.iter().zip(rows).filter(|(p, &r)| **p == ds.clean_labels[r]).count();
    Ok(Some(hits as f64 / rows.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::params::ModelDims;
    use crate::numcore::{finite_diff_grad, max_relative_error};

    fn dims() -> ModelDims {
        ModelDims {
            input: 4,
            deep: 6,
            compact: 4,
            relational: 3,
            estimator_hidden: 3,
            hgnn_layers: 2,
            expr: 5,
            classes: 3,
        }
    }

    fn toy(seed: u64, n: usize) -> (Matrix, Vec<usize>, Prototypes) {
        let mut rng = Rng::new(seed);
        let x = Matrix::new(n, 4, (0..n * 4).map(|_| rng.normal()).collect()).unwrap();
        let labels = (0..n).map(|_| rng.below(3)).collect();
        let mut g = Prototypes::empty(3, 5);
        g.values = Matrix::new(3, 5, (0..15).map(|_| rng.uniform()).collect()).unwrap();
        g.present = vec![true, true, false];
        (x, labels, g)
    }

    fn randomize_biases(p: &mut ModelParams, rng: &mut Rng) {
        for layer in p.backbone.layers.iter_mut().chain(&mut p.ec.expr.layers) {
            for b in &mut layer.bias {
                *b = rng.uniform_range(-0.5, 0.5);
            }
        }
    }

    #[test]
    fn baseline_gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = Rng::new(100 + seed);
            let mut p = ModelParams::init(&dims(), &mut rng);
            randomize_biases(&mut p, &mut rng);
            let (x, labels, g) = toy(seed, 7);
            let cfg = TrainConfig {
                method: Method::Baseline,
                ..TrainConfig::default()
            };
            let step = batch_step(&p, &x, &labels, &g, &cfg).unwrap();
            let numeric = finite_diff_grad(
                |theta| {
                    let mut q = p.clone();
                    q.assign(theta).unwrap();
                    batch_step(&q, &x, &labels, &g, &cfg).unwrap().loss
                },
                &p.flatten(),
                1e-5,
            );
            let err = max_relative_error(&step.grads.flatten(), &numeric);
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn baseline_never_touches_uncertainty_parameters() {
        let p = ModelParams::init(&dims(), &mut Rng::new(3));
        let (x, labels, g) = toy(1, 6);
        let cfg = TrainConfig {
            method: Method::Baseline,
            ..TrainConfig::default()
        };
        let step = batch_step(&p, &x, &labels, &g, &cfg).unwrap();
        assert_eq!(step.grads.ue.max_abs_or_zero(), 0.0);
        assert!(step.loss_w.is_none());
        assert!(step.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn ue_no_w_ignores_lambda1() {
        let p = ModelParams::init(&dims(), &mut Rng::new(4));
        let (x, labels, g) = toy(2, 8);
        let base = TrainConfig {
            method: Method::UeNoW,
            ue_kernel: KernelConfig::with_neighbors(3),
            ..TrainConfig::default()
        };
        let a = batch_step(&p, &x, &labels, &g, &base).unwrap();
        let b = batch_step(&p, &x, &labels, &g, &TrainConfig { lambda1: 5.0, ..base }).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
        assert!(a.loss_w.is_some());
    }

    #[test]
    fn batches_cover_every_position_once() {
        let plan = batches(70, 32, &mut Rng::new(0));
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 6]);
        let mut all: Vec<usize> = plan.concat();
        all.sort_unstable();
        assert_eq!(all, (0..70).collect::<Vec<_>>());
    }

    trait MaxAbs {
        fn max_abs_or_zero(&self) -> f64;
    }

    impl<T: Parameters> MaxAbs for T {
        fn max_abs_or_zero(&self) -> f64 {
            self.flatten().iter().fold(0.0, |m, v| m.max(v.abs()))
        }
    }
}
