//! Uncertainty estimation block.
//!
//! `c = compact(x)`, `r = hgnn(c)` over the k-NN hypergraph of `c`,
//! `u = [c ‖ r]`, `β = estimator(u)` with a sigmoid head. The estimator is
//! wrapped in [`Private`] and never leaves its client.
//!
//! Also hosts the two losses that consume β: the weight regularization
//! hinge and the logit-weighted cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::{
    build_knn_hypergraph, hgnn_backward, hgnn_forward, normalized_operator, Hgnn, HgnnCache, KernelConfig,
};
use crate::numcore::{Activation, Matrix, MlpCache, MlpParams, Parameters, Rng};

/// Whether a tensor group takes part in server aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    Shared,
    Private,
}

/// Marks a parameter group as client-private.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Private<T>(pub T);

impl<T> Private<T> {
    pub const SHARING: Sharing = Sharing::Private;

    pub fn get(&self) -> &T {
        &self.0
    }

    pub fn get_mut(&mut self) -> &mut T {
        &mut self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UeDims {
    pub input: usize,
    pub compact: usize,
    pub relational: usize,
    pub estimator_hidden: usize,
    pub hgnn_layers: usize,
}

impl Default for UeDims {
    fn default() -> Self {
        Self {
            input: 64,
            compact: 64,
            relational: 64,
            estimator_hidden: 32,
            hgnn_layers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UeParams {
    pub compact: MlpParams,
    pub hgnn: Hgnn,
    pub estimator: Private<MlpParams>,
}

impl UeParams {
    pub fn init(dims: &UeDims, rng: &mut Rng) -> Self {
        let compact = MlpParams::init(&[dims.input, dims.compact], &[Activation::Relu], rng);
        let mut hgnn_dims = vec![dims.compact];
        hgnn_dims.extend(std::iter::repeat_n(dims.relational, dims.hgnn_layers.max(1)));
        let hgnn = Hgnn::init(&hgnn_dims, rng);
        let estimator = Self::init_estimator(dims, rng);
        Self {
            compact,
            hgnn,
            estimator: Private(estimator),
        }
    }

    /// `[c‖r → h, PReLU, h → 1, sigmoid]`.
    pub fn init_estimator(dims: &UeDims, rng: &mut Rng) -> MlpParams {
        MlpParams::init(
            &[dims.compact + dims.relational, dims.estimator_hidden, 1],
            &[Activation::Prelu, Activation::Sigmoid],
            rng,
        )
    }

    pub fn compact_dim(&self) -> usize {
        self.compact.output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    /// Tensor groups with their aggregation role.
    pub fn sharing(&self) -> [(&'static str, Sharing); 3] {
        [
            ("ue.compact", Sharing::Shared),
            ("ue.hgnn", Sharing::Shared),
            ("ue.estimator", Private::<MlpParams>::SHARING),
        ]
    }
}

impl Parameters for UeParams {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.compact.visit(f);
        self.hgnn.visit(f);
        self.estimator.0.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.compact.visit_mut(f);
        self.hgnn.visit_mut(f);
        self.estimator.0.visit_mut(f);
    }
}

/// Where the hypergraph operator for a forward pass comes from.
#[derive(Clone, Copy, Debug)]
pub enum OperatorSource<'a> {
    /// Build the k-NN hypergraph on the compact features.
    Build(&'a KernelConfig),
    /// Reuse a precomputed operator (treated as constant, as in backward).
    Fixed(&'a Matrix),
}

#[derive(Clone, Debug)]
pub struct UncertaintyOutputs {
    pub beta: Vec<f64>,
    pub uncertainty_features: Matrix,
    pub compact: Matrix,
    pub relational: Matrix,
    pub operator: Matrix,
}

#[derive(Clone, Debug)]
pub struct UeCache {
    compact: MlpCache,
    hgnn: HgnnCache,
    estimator: MlpCache,
    compact_dim: usize,
    rows: usize,
}

pub fn ue_forward(x: &Matrix, p: &UeParams, cfg: &KernelConfig) -> Result<(UncertaintyOutputs, UeCache)> {
    ue_forward_with(x, p, OperatorSource::Build(cfg))
}

pub fn ue_forward_with(x: &Matrix, p: &UeParams, source: OperatorSource<'_>) -> Result<(UncertaintyOutputs, UeCache)> {
    if x.rows() == 0 {
        return Err(Error::Topology("empty batch".into()));
    }
    let (compact, compact_cache) = p.compact.forward(x)?;
    let operator = match source {
        OperatorSource::Build(cfg) => normalized_operator(&build_knn_hypergraph(&compact, cfg)?)?,
        OperatorSource::Fixed(s) => s.clone(),
    };
    let (relational, hgnn_cache) = hgnn_forward(&compact, &operator, &p.hgnn)?;
    let u = compact.hconcat(&relational)?;
    let (beta_col, estimator_cache) = p.estimator.0.forward(&u)?;
    if beta_col.cols() != 1 {
        return Err(Error::Shape {
            op: "uncertainty estimator output",
            left: beta_col.shape(),
            right: (x.rows(), 1),
        });
    }
    let cache = UeCache {
        compact: compact_cache,
        hgnn: hgnn_cache,
        estimator: estimator_cache,
        compact_dim: compact.cols(),
        rows: x.rows(),
    };
    Ok((
        UncertaintyOutputs {
            beta: beta_col.into_vec(),
            uncertainty_features: u,
            compact,
            relational,
            operator,
        },
        cache,
    ))
}

/// Backpropagates `grad_beta` (and optionally a direct gradient on the
/// uncertainty features) through estimator, concat, HGNN and compact MLP.
/// The hypergraph operator is held constant.
pub fn ue_backward(
    p: &UeParams,
    cache: &UeCache,
    grad_beta: &[f64],
    grad_features: Option<&Matrix>,
) -> Result<(UeParams, Matrix)> {
    if grad_beta.len() != cache.rows {
        return Err(Error::Length {
            what: "grad_beta",
            expected: cache.rows,
            got: grad_beta.len(),
        });
    }
    if cache.compact_dim != p.compact_dim() {
        return Err(Error::StaleCache("compact width differs"));
    }
    let (g_est, mut g_u) = p.estimator.0.backward(&cache.estimator, &Matrix::column(grad_beta))?;
    if let Some(extra) = grad_features {
        g_u.add_assign(extra)?;
    }
    let (mut g_c, g_r) = g_u.split_cols(cache.compact_dim);
    let (g_hgnn, g_c_through) = hgnn_backward(&p.hgnn, &cache.hgnn, &g_r)?;
    g_c.add_assign(&g_c_through)?;
    let (g_compact, g_x) = p.compact.backward(&cache.compact, &g_c)?;
    Ok((
        UeParams {
            compact: g_compact,
            hgnn: g_hgnn,
            estimator: Private(g_est),
        },
        g_x,
    ))
}

/// How the sorted batch is split into certain and uncertain groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// The lowest ⌈ζN⌉ weights are certain.
    Fraction,
    /// Weights below ζ are certain.
    Threshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRegConfig {
    pub margin: f64,
    pub certain_fraction: f64,
    pub split: SplitMode,
}

impl Default for WeightRegConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            certain_fraction: 0.7,
            split: SplitMode::Fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRegOutput {
    pub loss: f64,
    pub grad_beta: Vec<f64>,
    pub certain_mean: f64,
    pub uncertain_mean: f64,
    /// One of the groups was empty; loss and gradient are zero.
    pub degenerate: bool,
}

/// Number of certain samples for a batch of `n` under the fraction split.
pub fn certain_count(n: usize, fraction: f64) -> usize {
    // the epsilon keeps 0.7 * 10 from rounding up to 8
    let raw = (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.clamp(1, n.saturating_sub(1).max(1))
}

/// Hinge `max(0, η − (β_U − β_C))` over the sorted split.
pub fn weight_reg_loss(beta: &[f64], cfg: &WeightRegConfig) -> WeightRegOutput {
    let n = beta.len();
    let degenerate = |cm: f64, um: f64| WeightRegOutput {
        loss: 0.0,
        grad_beta: vec![0.0; n],
        certain_mean: cm,
        uncertain_mean: um,
        degenerate: true,
    };
    if n < 2 {
        let m = beta.first().copied().unwrap_or(f64::NAN);
        return degenerate(m, m);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| beta[a].total_cmp(&beta[b]).then(a.cmp(&b)));
    let n_certain = match cfg.split {
        SplitMode::Fraction => certain_count(n, cfg.certain_fraction),
        SplitMode::Threshold => order.iter().take_while(|&&i| beta[i] < cfg.certain_fraction).count(),
    };
    let (certain, uncertain) = order.split_at(n_certain);
    let mean = |idx: &[usize]| idx.iter().map(|&i| beta[i]).sum::<f64>() / idx.len() as f64;
    if certain.is_empty() || uncertain.is_empty() {
        let m = mean(&order);
        return degenerate(m, m);
    }
    let certain_mean = mean(certain);
    let uncertain_mean = mean(uncertain);
    let raw = cfg.margin - (uncertain_mean - certain_mean);
    let mut grad_beta = vec![0.0; n];
    let loss = if raw > 0.0 {
        for &i in certain {
            grad_beta[i] = 1.0 / certain.len() as f64;
        }
        for &i in uncertain {
            grad_beta[i] = -1.0 / uncertain.len() as f64;
        }
        raw
    } else {
        0.0
    };
    WeightRegOutput {
        loss,
        grad_beta,
        certain_mean,
        uncertain_mean,
        degenerate: false,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WceOutput {
    pub loss: f64,
    pub grad_logits: Matrix,
    pub grad_beta: Vec<f64>,
}

/// Logit-weighted cross-entropy: each row of logits is scaled by `1 − βᵢ`
/// before softmax; batch mean. Labels are 0-indexed.
pub fn weighted_ce_loss(logits: &Matrix, labels: &[usize], beta: &[f64]) -> Result<WceOutput> {
    let (n, classes) = logits.shape();
    for (what, len) in [("labels", labels.len()), ("beta", beta.len())] {
        if len != n {
            return Err(Error::Length {
                what,
                expected: n,
                got: len,
            });
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad + 1,
            classes,
        });
    }
    let inv_n = 1.0 / n.max(1) as f64;
    let mut loss = 0.0;
    let mut grad_logits = Matrix::zeros(n, classes);
    let mut grad_beta = vec![0.0; n];
    for i in 0..n {
        let scale = 1.0 - beta[i];
        let f = logits.row(i);
        let max = f.iter().map(|v| v * scale).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = f.iter().map(|v| (v * scale - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss -= (f[labels[i]] * scale - max) - total.ln();
        // dL/dz = (p − onehot)/N with z = scale · f
        let mut dbeta = 0.0;
        let row = grad_logits.row_mut(i);
        for j in 0..classes {
            let dz = (exps[j] / total - f64::from(u8::from(j == labels[i]))) * inv_n;
            row[j] = dz * scale;
            dbeta -= dz * f[j];
        }
        grad_beta[i] = dbeta;
    }
    Ok(WceOutput {
        loss: loss * inv_n,
        grad_logits,
        grad_beta,
    })
}
