//! Expression classification block: feature MLP and classifier, hypergraph
//! label propagation, argmax label extraction and the refinement rule.
//!
//! Classes are 0-indexed here; files and reports use 1-indexed labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::{build_knn_hypergraph, normalized_operator, KernelConfig};
use crate::numcore::{softmax_rows, solve_spd, Activation, Matrix, MlpCache, MlpParams, Parameters, Rng};
use crate::ue_block::{weighted_ce_loss, WceOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcParams {
    pub expr: MlpParams,
    /// Single linear layer `d_e → C`.
    pub classifier: MlpParams,
}

impl EcParams {
    pub fn init(input: usize, expr_dim: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            expr: MlpParams::init(&[input, expr_dim], &[Activation::Relu], rng),
            classifier: MlpParams::init(&[expr_dim, classes], &[Activation::Linear], rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }
}

impl Parameters for EcParams {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.expr.visit(f);
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.expr.visit_mut(f);
        self.classifier.visit_mut(f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub lambda: f64,
    pub kernel: KernelConfig,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            kernel: KernelConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub threshold: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { threshold: 0.6 }
    }
}

/// `(I + (1/λ)(I − Δ))` for a normalized operator `Δ`.
pub fn propagation_system(delta: &Matrix, lambda: f64) -> Matrix {
    let n = delta.rows();
    let inv = 1.0 / lambda;
    let mut a = delta.scale(-inv);
    for i in 0..n {
        a.set(i, i, a.get(i, i) + 1.0 + inv);
    }
    a
}

/// Closed-form propagation on a precomputed operator.
pub fn propagate_with_operator(delta: &Matrix, y: &Matrix, lambda: f64) -> Result<Matrix> {
    if !(lambda > 0.0) {
        return Err(Error::Topology(format!("trade-off must be positive, got {lambda}")));
    }
    solve_spd(&propagation_system(delta, lambda), y)
}

/// Builds the hypergraph on `features` and returns `F̂ = (I + (1/λ)(I − Δ))⁻¹ Y`.
pub fn label_propagate(features: &Matrix, y: &Matrix, cfg: &PropagationConfig) -> Result<Matrix> {
    if features.rows() != y.rows() {
        return Err(Error::Shape {
            op: "label_propagate",
            left: features.shape(),
            right: y.shape(),
        });
    }
    let delta = normalized_operator(&build_knn_hypergraph(features, &cfg.kernel)?)?;
    propagate_with_operator(&delta, y, cfg.lambda)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut y = Matrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l + 1, classes });
        }
        y.set(i, l, 1.0);
    }
    Ok(y)
}

/// Lowest index among the row maxima.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Softmax probabilities and their row-wise argmax.
pub fn scores_to_labels(scores: &Matrix) -> (Matrix, Vec<usize>) {
    let probs = softmax_rows(scores);
    let labels = (0..probs.rows()).map(|r| argmax(probs.row(r))).collect();
    (probs, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelChange {
    pub index: usize,
    pub old: usize,
    pub new: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Refinement {
    pub labels: Vec<usize>,
    /// Only entries whose label actually changed.
    pub changes: Vec<LabelChange>,
}

/// Adopt the joint label when `βᵢ ≥ δ` and propagation agrees with the
/// classifier; otherwise keep the original.
pub fn refine_labels(
    beta: &[f64],
    propagated: &[usize],
    predicted: &[usize],
    original: &[usize],
    cfg: &RefineConfig,
) -> Result<Refinement> {
    let n = original.len();
    for (what, len) in [
        ("beta", beta.len()),
        ("propagated labels", propagated.len()),
        ("predicted labels", predicted.len()),
    ] {
        if len != n {
            return Err(Error::Length {
                what,
                expected: n,
                got: len,
            });
        }
    }
    let mut labels = original.to_vec();
    let mut changes = Vec::new();
    for i in 0..n {
        if beta[i] >= cfg.threshold && propagated[i] == predicted[i] {
            labels[i] = propagated[i];
            if propagated[i] != original[i] {
                changes.push(LabelChange {
                    index: i,
                    old: original[i],
                    new: propagated[i],
                });
            }
        }
    }
    Ok(Refinement { labels, changes })
}

#[derive(Clone, Debug)]
pub struct EcCache {
    expr: MlpCache,
    classifier: MlpCache,
}

/// `e = expr(x)`, `logits = classifier(e)`.
pub fn ec_forward(x: &Matrix, p: &EcParams) -> Result<(Matrix, Matrix, EcCache)> {
    let (e, expr) = p.expr.forward(x)?;
    let (logits, classifier) = p.classifier.forward(&e)?;
    Ok((logits, e, EcCache { expr, classifier }))
}

/// Backward through classifier and feature MLP. `grad_features` is an extra
/// gradient on `e` (from the prototype loss).
pub fn ec_backward(
    p: &EcParams,
    cache: &EcCache,
    grad_logits: &Matrix,
    grad_features: Option<&Matrix>,
) -> Result<(EcParams, Matrix)> {
    let (g_cls, mut g_e) = p.classifier.backward(&cache.classifier, grad_logits)?;
    if let Some(extra) = grad_features {
        g_e.add_assign(extra)?;
    }
    let (g_expr, g_x) = p.expr.backward(&cache.expr, &g_e)?;
    Ok((
        EcParams {
            expr: g_expr,
            classifier: g_cls,
        },
        g_x,
    ))
}

#[derive(Clone, Debug)]
pub struct EcStep {
    pub logits: Matrix,
    pub features: Matrix,
    pub loss: WceOutput,
    pub grads: EcParams,
    pub grad_input: Matrix,
}

/// Forward, logit-weighted CE, and backward in one call.
pub fn ec_forward_backward(x: &Matrix, p: &EcParams, labels: &[usize], beta: &[f64]) -> Result<EcStep> {
    let (logits, features, cache) = ec_forward(x, p)?;
    let loss = weighted_ce_loss(&logits, labels, beta)?;
    let (grads, grad_input) = ec_backward(p, &cache, &loss.grad_logits, None)?;
    Ok(EcStep {
        logits,
        features,
        loss,
        grads,
        grad_input,
    })
}
