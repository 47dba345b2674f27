//! k-NN hypergraphs over a batch of feature vectors, the normalized
//! hypergraph operator `S = Dv^{-1/2} H W De^{-1} Hᵀ Dv^{-1/2}`, and
//! hypergraph convolution layers `X ← σ(S X Θ)`.
//!
//! Every vertex spawns one hyperedge containing itself and its K nearest
//! neighbors. The hyperedge weight is the mean Gaussian affinity between the
//! centroid and each member (the centroid contributes `exp(0) = 1`).
//! The operator is treated as a constant of the batch during backprop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{pairwise_sq_dist, Activation, Matrix, Parameters, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// σ = median of positive pairwise Euclidean distances in the batch.
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub neighbor_count: usize,
    pub bandwidth: Bandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            neighbor_count: 10,
            bandwidth: Bandwidth::Median,
        }
    }
}

impl KernelConfig {
    pub fn with_neighbors(neighbor_count: usize) -> Self {
        Self {
            neighbor_count,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypergraphTopology {
    pub n: usize,
    /// `H(v, e)`; column `e` is the hyperedge centred on vertex `e`.
    pub incidence: Matrix,
    pub edge_weights: Vec<f64>,
    pub vertex_degrees: Vec<f64>,
    pub edge_degrees: Vec<f64>,
    /// Members of each hyperedge, centroid first, then neighbors by distance.
    pub members: Vec<Vec<usize>>,
    pub sigma: f64,
    /// Set when the batch had no more than K vertices and hyperedges were
    /// clamped to the whole batch.
    pub clamped: bool,
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    })
}

/// Builds the k-NN hypergraph of the rows of `features`.
pub fn build_knn_hypergraph(features: &Matrix, cfg: &KernelConfig) -> Result<HypergraphTopology> {
    let n = features.rows();
    if n == 0 || features.cols() == 0 {
        return Err(Error::Topology(format!(
            "cannot build a hypergraph over a {:?} feature matrix",
            features.shape()
        )));
    }
    if cfg.neighbor_count == 0 {
        return Err(Error::Topology("neighbor_count must be at least 1".into()));
    }
    let dist2 = pairwise_sq_dist(features);

    let sigma = match cfg.bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
        Bandwidth::Fixed(s) => return Err(Error::Topology(format!("bandwidth must be positive, got {s}"))),
        Bandwidth::Median => {
            let mut positive = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in (i + 1)..n {
                    let d = dist2.get(i, j);
                    if d > 0.0 {
                        positive.push(d.sqrt());
                    }
                }
            }
            // all points identical: every affinity is exp(0) regardless of σ
            median(positive).unwrap_or(1.0)
        }
    };

    let clamped = cfg.neighbor_count >= n;
    let k = cfg.neighbor_count.min(n - 1);
    let mut members = Vec::with_capacity(n);
    let mut incidence = Matrix::zeros(n, n);
    let mut edge_weights = Vec::with_capacity(n);
    let two_sigma_sq = 2.0 * sigma * sigma;
    for v in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&u| u != v).collect();
        others.sort_by(|&a, &b| dist2.get(v, a).total_cmp(&dist2.get(v, b)).then(a.cmp(&b)));
        let mut edge = Vec::with_capacity(k + 1);
        edge.push(v);
        edge.extend_from_slice(&others[..k]);
        let affinity: f64 = edge.iter().map(|&u| (-dist2.get(v, u) / two_sigma_sq).exp()).sum();
        edge_weights.push(affinity / edge.len() as f64);
        for &u in &edge {
            incidence.set(u, v, 1.0);
        }
        members.push(edge);
    }

    let edge_degrees = incidence.column_sums();
    let vertex_degrees = (0..n)
        .map(|v| {
            incidence
                .row(v)
                .iter()
                .zip(&edge_weights)
                .map(|(h, w)| h * w)
                .sum()
        })
        .collect();

    Ok(HypergraphTopology {
        n,
        incidence,
        edge_weights,
        vertex_degrees,
        edge_degrees,
        members,
        sigma,
        clamped,
    })
}

impl HypergraphTopology {
    /// Topology from an explicit incidence matrix and edge weights.
    pub fn from_incidence(incidence: Matrix, edge_weights: Vec<f64>) -> Result<Self> {
        let (n, m) = incidence.shape();
        if edge_weights.len() != m {
            return Err(Error::Length {
                what: "edge weights",
                expected: m,
                got: edge_weights.len(),
            });
        }
        let members = (0..m)
            .map(|e| (0..n).filter(|&v| incidence.get(v, e) != 0.0).collect())
            .collect();
        let edge_degrees = incidence.column_sums();
        let vertex_degrees = (0..n)
            .map(|v| incidence.row(v).iter().zip(&edge_weights).map(|(h, w)| h * w).sum())
            .collect();
        Ok(Self {
            n,
            incidence,
            edge_weights,
            vertex_degrees,
            edge_degrees,
            members,
            sigma: 1.0,
            clamped: false,
        })
    }
}

/// `S = Dv^{-1/2} H W De^{-1} Hᵀ Dv^{-1/2}`.
pub fn normalized_operator(t: &HypergraphTopology) -> Result<Matrix> {
    if let Some(v) = t.vertex_degrees.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::Topology(format!("vertex {v} has non-positive degree")));
    }
    if let Some(e) = t.edge_degrees.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::Topology(format!("hyperedge {e} is empty")));
    }
    let inv_sqrt_dv: Vec<f64> = t.vertex_degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut s = Matrix::zeros(t.n, t.n);
    for (e, edge) in t.members.iter().enumerate() {
        let w = t.edge_weights[e] / t.edge_degrees[e];
        for &i in edge {
            for &j in edge {
                let v = s.get(i, j) + w * inv_sqrt_dv[i] * inv_sqrt_dv[j];
                s.set(i, j, v);
            }
        }
    }
    Ok(s)
}

/// One hypergraph convolution layer: `X ← σ(S X Θ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HgnnLayerParams {
    pub theta: Matrix,
    pub activation: Activation,
}

/// A stack of hypergraph convolution layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hgnn {
    pub layers: Vec<HgnnLayerParams>,
}

#[derive(Clone, Debug)]
pub struct HgnnCache {
    inputs: Vec<Matrix>,
    propagated: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    operator: Matrix,
}

impl Hgnn {
    /// ReLU on hidden layers, linear on the last.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Self {
        let depth = dims.len() - 1;
        let layers = (0..depth)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let theta = Matrix::new(
                    fan_in,
                    fan_out,
                    (0..fan_in * fan_out).map(|_| rng.uniform_range(-limit, limit)).collect(),
                )
                .expect("sized above");
                let activation = if l + 1 == depth {
                    Activation::Linear
                } else {
                    Activation::Relu
                };
                HgnnLayerParams { theta, activation }
            })
            .collect();
        Self { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.theta.cols())
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }
}

fn activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Relu => z.max(0.0),
        Activation::Linear => z,
        Activation::Sigmoid => crate::numcore::sigmoid(z),
        Activation::Prelu => unreachable!("hgnn layers use relu or linear"),
    }
}

fn activate_grad(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Relu => f64::from(u8::from(z > 0.0)),
        Activation::Linear => 1.0,
        Activation::Sigmoid => {
            let s = crate::numcore::sigmoid(z);
            s * (1.0 - s)
        }
        Activation::Prelu => unreachable!("hgnn layers use relu or linear"),
    }
}

/// Applies every layer in order and records what backward needs.
pub fn hgnn_forward(x: &Matrix, s: &Matrix, net: &Hgnn) -> Result<(Matrix, HgnnCache)> {
    if s.rows() != s.cols() || s.rows() != x.rows() {
        return Err(Error::Shape {
            op: "hgnn_forward",
            left: x.shape(),
            right: s.shape(),
        });
    }
    let mut cache = HgnnCache {
        inputs: Vec::with_capacity(net.layers.len()),
        propagated: Vec::with_capacity(net.layers.len()),
        pre_activations: Vec::with_capacity(net.layers.len()),
        operator: s.clone(),
    };
    let mut h = x.clone();
    for layer in &net.layers {
        if layer.activation == Activation::Prelu {
            return Err(Error::Topology("prelu is not supported in hgnn layers".into()));
        }
        let sx = s.matmul(&h)?;
        let z = sx.matmul(&layer.theta)?;
        let out = z.map(|v| activate(layer.activation, v));
        cache.inputs.push(h);
        cache.propagated.push(sx);
        cache.pre_activations.push(z);
        h = out;
    }
    Ok((h, cache))
}

/// Gradients with respect to every Θ and to the input signal.
pub fn hgnn_backward(net: &Hgnn, cache: &HgnnCache, grad_output: &Matrix) -> Result<(Hgnn, Matrix)> {
    if cache.inputs.len() != net.layers.len()
        || cache
            .inputs
            .iter()
            .zip(&net.layers)
            .any(|(x, l)| x.cols() != l.theta.rows())
    {
        return Err(Error::StaleCache("hgnn layer shapes differ"));
    }
    let mut grads = net.zeros_like();
    let mut upstream = grad_output.clone();
    for (l, layer) in net.layers.iter().enumerate().rev() {
        let z = &cache.pre_activations[l];
        if upstream.shape() != z.shape() {
            return Err(Error::Shape {
                op: "hgnn_backward",
                left: upstream.shape(),
                right: z.shape(),
            });
        }
        let mut dz = upstream;
        for (d, zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *d *= activate_grad(layer.activation, *zv);
        }
        grads.layers[l].theta = cache.propagated[l].t_matmul(&dz)?;
        // d(S X Θ)/dX applied to dz: Sᵀ dz Θᵀ
        upstream = cache.operator.t_matmul(&dz.matmul_t(&layer.theta)?)?;
    }
    Ok((grads, upstream))
}

impl Parameters for Hgnn {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        for l in &self.layers {
            l.theta.as_slice().iter().for_each(|v| f(*v));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.theta.as_mut_slice().iter_mut().for_each(&mut *f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_grad, max_relative_error};

    fn fixed(k: usize) -> KernelConfig {
        KernelConfig {
            neighbor_count: k,
            bandwidth: Bandwidth::Fixed(1.0),
        }
    }

    #[test]
    fn single_vertex() {
        let t = build_knn_hypergraph(&Matrix::from_rows(&[[3.0, 1.0]]), &KernelConfig::default()).unwrap();
        assert_eq!(t.incidence, Matrix::from_rows(&[[1.0]]));
        assert_eq!(t.edge_weights, vec![1.0]);
        assert_eq!(t.vertex_degrees, vec![1.0]);
        assert_eq!(t.edge_degrees, vec![1.0]);
        assert!(t.clamped);
        assert_eq!(normalized_operator(&t).unwrap(), Matrix::from_rows(&[[1.0]]));
    }

    #[test]
    fn line_of_three() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [10.0]]);
        let t = build_knn_hypergraph(&x, &fixed(1)).unwrap();
        assert_eq!(t.members, vec![vec![0, 1], vec![1, 0], vec![2, 1]]);
        assert_eq!(t.edge_degrees, vec![2.0, 2.0, 2.0]);
        // unit weights give Dv = row sums of H
        assert_eq!(t.incidence.row_sums(), vec![2.0, 3.0, 1.0]);
        assert!(!t.clamped);
    }

    #[test]
    fn identical_features_weigh_one() {
        let x = Matrix::filled(4, 3, 2.5);
        let t = build_knn_hypergraph(&x, &KernelConfig::with_neighbors(2)).unwrap();
        assert!(t.edge_weights.iter().all(|w| *w == 1.0));
        assert_eq!(t.edge_degrees, vec![3.0; 4]);
        // ties resolved by index
        assert_eq!(t.members[3], vec![3, 0, 1]);
    }

    #[test]
    fn clamps_when_batch_is_small() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [3.0]]);
        let t = build_knn_hypergraph(&x, &KernelConfig::with_neighbors(10)).unwrap();
        assert!(t.clamped);
        assert_eq!(t.edge_degrees, vec![3.0; 3]);
    }

    #[test]
    fn shared_pair_operator() {
        let h = Matrix::from_rows(&[[1.0], [1.0]]);
        let t = HypergraphTopology::from_incidence(h, vec![1.0]).unwrap();
        let s = normalized_operator(&t).unwrap();
        assert_eq!(s, Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]));
    }

    #[test]
    fn operator_matches_dense_oracle() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [10.0]]);
        let t = build_knn_hypergraph(&x, &KernelConfig::with_neighbors(1)).unwrap();
        let s = normalized_operator(&t).unwrap();
        let n = 3;
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for e in 0..n {
                    acc += t.incidence.get(i, e) * t.edge_weights[e] / t.edge_degrees[e] * t.incidence.get(j, e);
                }
                acc /= (t.vertex_degrees[i] * t.vertex_degrees[j]).sqrt();
                assert!((s.get(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn degree_bookkeeping() {
        let mut rng = Rng::new(4);
        let x = Matrix::new(12, 3, (0..36).map(|_| rng.normal()).collect()).unwrap();
        let t = build_knn_hypergraph(&x, &KernelConfig::with_neighbors(4)).unwrap();
        assert_eq!(t.incidence.column_sums(), t.edge_degrees);
        for v in 0..12 {
            let dv: f64 = (0..12).map(|e| t.edge_weights[e] * t.incidence.get(v, e)).sum();
            assert!((dv - t.vertex_degrees[v]).abs() < 1e-15);
            assert_eq!(t.incidence.get(v, v), 1.0);
        }
        assert!(t.edge_degrees.iter().all(|d| *d == 5.0));
        let again = build_knn_hypergraph(&x, &KernelConfig::with_neighbors(4)).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn identity_and_relu_forward() {
        let x = Matrix::from_rows(&[[1.0, -2.0], [-3.0, 4.0]]);
        let s = Matrix::identity(2);
        let mut net = Hgnn {
            layers: vec![HgnnLayerParams {
                theta: Matrix::identity(2),
                activation: Activation::Linear,
            }],
        };
        assert_eq!(hgnn_forward(&x, &s, &net).unwrap().0, x);
        net.layers[0].activation = Activation::Relu;
        assert_eq!(
            hgnn_forward(&x, &s, &net).unwrap().0,
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 4.0]])
        );
    }

    fn random_instance(seed: u64) -> (Matrix, Matrix, Hgnn) {
        let mut rng = Rng::new(seed);
        let x = Matrix::new(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
        let t = build_knn_hypergraph(&x, &KernelConfig::with_neighbors(2)).unwrap();
        let s = normalized_operator(&t).unwrap();
        let net = Hgnn::init(&[3, 4, 2], &mut rng);
        (x, s, net)
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let (x, s, net) = random_instance(9);
        let out = hgnn_forward(&x, &s, &net).unwrap().0;
        let h1 = s.matmul(&x).unwrap().matmul(&net.layers[0].theta).unwrap().map(|v| v.max(0.0));
        let h2 = s.matmul(&h1).unwrap().matmul(&net.layers[1].theta).unwrap();
        assert!(out.sub(&h2).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn composition_of_single_layers() {
        let (x, s, net) = random_instance(10);
        let full = hgnn_forward(&x, &s, &net).unwrap().0;
        let mut h = x.clone();
        for layer in &net.layers {
            let single = Hgnn {
                layers: vec![layer.clone()],
            };
            h = hgnn_forward(&h, &s, &single).unwrap().0;
        }
        assert_eq!(full, h);
    }

    #[test]
    fn backward_zero_and_single_linear() {
        let (x, s, net) = random_instance(11);
        let (_, cache) = hgnn_forward(&x, &s, &net).unwrap();
        let (g, gx) = hgnn_backward(&net, &cache, &Matrix::zeros(6, 2)).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(gx.as_slice().iter().all(|v| *v == 0.0));

        let single = Hgnn {
            layers: vec![HgnnLayerParams {
                theta: net.layers[0].theta.clone(),
                activation: Activation::Linear,
            }],
        };
        let (_, cache) = hgnn_forward(&x, &s, &single).unwrap();
        let upstream = Matrix::filled(6, 4, 0.5);
        let (g, _) = hgnn_backward(&single, &cache, &upstream).unwrap();
        let expected = s.matmul(&x).unwrap().t_matmul(&upstream).unwrap();
        assert!(g.layers[0].theta.sub(&expected).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..20 {
            let (x, s, net) = random_instance(100 + seed);
            let mut rng = Rng::new(seed);
            let upstream = Matrix::new(6, 2, (0..12).map(|_| rng.normal()).collect()).unwrap();
            let loss = |net: &Hgnn, x: &Matrix| -> f64 {
                let out = hgnn_forward(x, &s, net).unwrap().0;
                out.as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = hgnn_forward(&x, &s, &net).unwrap();
            let (g, gx) = hgnn_backward(&net, &cache, &upstream).unwrap();
            let fd = finite_diff_grad(
                |t| {
                    let mut n = net.clone();
                    n.assign(t).unwrap();
                    loss(&n, &x)
                },
                &net.flatten(),
                1e-5,
            );
            assert!(max_relative_error(&g.flatten(), &fd) <= 1e-4);
            let fdx = finite_diff_grad(
                |t| loss(&net, &Matrix::new(6, 3, t.to_vec()).unwrap()),
                x.as_slice(),
                1e-5,
            );
            assert!(max_relative_error(gx.as_slice(), &fdx) <= 1e-4);
        }
    }
}
