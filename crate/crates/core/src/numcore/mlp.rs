//! Fully connected layers with hand-derived gradients.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::Parameters;
use super::rng::Rng;
use crate::error::{Error, Result};

pub const PRELU_INIT_SLOPE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    /// Leaky rectifier with a learnable scalar slope per layer.
    Prelu,
    Sigmoid,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    fn apply(self, z: f64, slope: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Prelu => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Sigmoid => sigmoid(z),
        }
    }

    #[inline]
    fn derivative(self, z: f64, slope: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Prelu => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }
}

/// One affine map followed by an activation. `weight` is `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    /// Only trained (and only traversed) for [`Activation::Prelu`].
    pub slope: f64,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
            activation,
            slope: if activation == Activation::Prelu {
                PRELU_INIT_SLOPE
            } else {
                0.0
            },
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(input: usize, output: usize, activation: Activation, rng: &mut Rng) -> Self {
        let mut layer = Self::zeros(input, output, activation);
        let limit = (6.0 / (input + output) as f64).sqrt();
        for w in layer.weight.as_mut_slice() {
            *w = rng.uniform_range(-limit, limit);
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

/// Activation record of one [`MlpParams::forward`] call.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    dims: Vec<(usize, usize)>,
}

impl MlpParams {
    /// Layers must chain: out-dim of layer i equals in-dim of layer i+1.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape {
                    op: "mlp layer chain",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// `dims = [d0, d1, ..., dL]` with one activation per layer.
    pub fn init(dims: &[usize], activations: &[Activation], rng: &mut Rng) -> Self {
        assert_eq!(dims.len(), activations.len() + 1);
        let layers = activations
            .iter()
            .enumerate()
            .map(|(i, act)| DenseLayer::init(dims[i], dims[i + 1], *act, rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::output_dim)
    }

    fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.shape()).collect()
    }

    /// Zero-valued gradient container with this network's shape.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp_forward",
                left: x.shape(),
                right: (self.input_dim(), self.output_dim()),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = h.matmul(&layer.weight)?.add_row_vector(&layer.bias)?;
            let a = z.map(|v| layer.activation.apply(v, layer.slope));
            inputs.push(h);
            pre_activations.push(z);
            h = a;
        }
        Ok((
            h,
            MlpCache {
                inputs,
                pre_activations,
                dims: self.dims(),
            },
        ))
    }

    /// Output only.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Returns `(grad_params, grad_input)` for the scalar loss whose gradient
    /// with respect to the forward output is `grad_output`.
    pub fn backward(&self, cache: &MlpCache, grad_output: &Matrix) -> Result<(MlpParams, Matrix)> {
        if cache.dims != self.dims() {
            return Err(Error::StaleCache("mlp layer shapes differ"));
        }
        let rows = cache.inputs.first().map_or(0, Matrix::rows);
        if grad_output.shape() != (rows, self.output_dim()) {
            return Err(Error::Shape {
                op: "mlp_backward",
                left: grad_output.shape(),
                right: (rows, self.output_dim()),
            });
        }
        let mut grads = self.zeros_like();
        let mut upstream = grad_output.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[l];
            let mut dz = upstream.clone();
            let mut dslope = 0.0;
            for (d, zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
                if layer.activation == Activation::Prelu && *zv <= 0.0 {
                    dslope += *d * zv;
                }
                *d *= layer.activation.derivative(*zv, layer.slope);
            }
            let g = &mut grads.layers[l];
            g.weight = cache.inputs[l].t_matmul(&dz)?;
            g.bias = dz.column_sums();
            g.slope = dslope;
            upstream = dz.matmul_t(&layer.weight)?;
        }
        Ok((grads, upstream))
    }
}

impl Parameters for MlpParams {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        for layer in &self.layers {
            layer.weight.as_slice().iter().for_each(|v| f(*v));
            layer.bias.iter().for_each(|v| f(*v));
            if layer.activation == Activation::Prelu {
                f(layer.slope);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        for layer in &mut self.layers {
            layer.weight.as_mut_slice().iter_mut().for_each(&mut *f);
            layer.bias.iter_mut().for_each(&mut *f);
            if layer.activation == Activation::Prelu {
                f(&mut layer.slope);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{finite_diff_grad, max_relative_error};

    #[test]
    fn identity_layer_passes_input() {
        let mut layer = DenseLayer::zeros(3, 3, Activation::Linear);
        layer.weight = Matrix::identity(3);
        let net = MlpParams::from_layers(vec![layer]).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]]);
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn zero_sigmoid_layer_is_half() {
        let net = MlpParams::from_layers(vec![DenseLayer::zeros(2, 3, Activation::Sigmoid)]).unwrap();
        let out = net.predict(&Matrix::from_rows(&[[5.0, -7.0]])).unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn two_layer_relu_matches_hand_oracle() {
        let mut rng = Rng::new(3);
        let net = MlpParams::init(&[3, 4, 2], &[Activation::Relu, Activation::Linear], &mut rng);
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.2, -0.3]]);
        let out = net.predict(&x).unwrap();
        for r in 0..2 {
            let mut hidden = [0.0; 4];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut acc = net.layers[0].bias[j];
                for i in 0..3 {
                    acc += x.get(r, i) * net.layers[0].weight.get(i, j);
                }
                *h = if acc > 0.0 { acc } else { 0.0 };
            }
            for k in 0..2 {
                let mut acc = net.layers[1].bias[k];
                for (j, h) in hidden.iter().enumerate() {
                    acc += h * net.layers[1].weight.get(j, k);
                }
                assert!((out.get(r, k) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(5);
        let net = MlpParams::init(&[3, 4, 2], &[Activation::Prelu, Activation::Sigmoid], &mut rng);
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0]]);
        let (_, cache) = net.forward(&x).unwrap();
        let (g, gx) = net.backward(&cache, &Matrix::zeros(1, 2)).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(gx.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_sum_loss_gradient() {
        let mut rng = Rng::new(8);
        let net = MlpParams::init(&[3, 2], &[Activation::Linear], &mut rng);
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]]);
        let (_, cache) = net.forward(&x).unwrap();
        let (g, _) = net.backward(&cache, &Matrix::filled(2, 2, 1.0)).unwrap();
        let expected_w = x.t_matmul(&Matrix::filled(2, 2, 1.0)).unwrap();
        assert_eq!(g.layers[0].weight, expected_w);
        assert_eq!(g.layers[0].bias, vec![2.0, 2.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        for trial in 0..20 {
            let mut net = MlpParams::init(
                &[4, 5, 3, 2],
                &[Activation::Relu, Activation::Prelu, Activation::Sigmoid],
                &mut rng,
            );
            // nonzero biases keep dead rows off the exact kink at z = 0
            for layer in &mut net.layers {
                layer.bias.iter_mut().for_each(|b| *b = rng.uniform_range(-0.5, 0.5));
            }
            let x = Matrix::new(3, 4, (0..12).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap();
            let upstream = Matrix::new(3, 2, (0..6).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
            let loss = |n: &MlpParams| -> f64 {
                let out = n.predict(&x).unwrap();
                out.as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = net.forward(&x).unwrap();
            let (g, _) = net.backward(&cache, &upstream).unwrap();
            let theta = net.flatten();
            let fd = finite_diff_grad(
                |t| {
                    let mut n = net.clone();
                    n.assign(t).unwrap();
                    loss(&n)
                },
                &theta,
                1e-5,
            );
            let err = max_relative_error(&g.flatten(), &fd);
            assert!(err <= 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = Rng::new(1);
        let a = MlpParams::init(&[3, 2], &[Activation::Linear], &mut rng);
        let b = MlpParams::init(&[3, 4], &[Activation::Linear], &mut rng);
        let (_, cache) = a.forward(&Matrix::zeros(1, 3)).unwrap();
        assert!(matches!(b.backward(&cache, &Matrix::zeros(1, 4)), Err(Error::StaleCache(_))));
    }

    #[test]
    fn layer_chain_is_validated() {
        let r = MlpParams::from_layers(vec![
            DenseLayer::zeros(3, 4, Activation::Relu),
            DenseLayer::zeros(5, 2, Activation::Linear),
        ]);
        assert!(r.is_err());
    }
}
