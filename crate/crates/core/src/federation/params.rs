use serde::{Deserialize, Serialize};

use crate::ec_block::EcParams;
use crate::error::{Error, Result};
use crate::numcore::{Activation, MlpParams, Parameters, Rng};
use crate::ue_block::{Sharing, UeDims, UeParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub deep: usize,
    pub compact: usize,
    pub relational: usize,
    pub estimator_hidden: usize,
    pub hgnn_layers: usize,
    pub expr: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn ue(&self) -> UeDims {
        UeDims {
            input: self.deep,
            compact: self.compact,
            relational: self.relational,
            estimator_hidden: self.estimator_hidden,
            hgnn_layers: self.hgnn_layers,
        }
    }
}

/// Everything one client trains. Only `ue.estimator` is private.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub backbone: MlpParams,
    pub ue: UeParams,
    pub ec: EcParams,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorGroup {
    pub name: &'static str,
    pub sharing: Sharing,
    pub len: usize,
}

impl ModelParams {
    pub fn init(dims: &ModelDims, rng: &mut Rng) -> Self {
        Self {
            backbone: MlpParams::init(&[dims.input, dims.deep], &[Activation::Relu], rng),
            ue: UeParams::init(&dims.ue(), rng),
            ec: EcParams::init(dims.deep, dims.expr, dims.classes, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    /// Tensor groups in traversal order.
    pub fn sharing_map(&self) -> Vec<TensorGroup> {
        let [compact, hgnn, estimator] = self.ue.sharing();
        vec![
            TensorGroup {
                name: "backbone",
                sharing: Sharing::Shared,
                len: self.backbone.num_params(),
            },
            TensorGroup {
                name: compact.0,
                sharing: compact.1,
                len: self.ue.compact.num_params(),
            },
            TensorGroup {
                name: hgnn.0,
                sharing: hgnn.1,
                len: self.ue.hgnn.num_params(),
            },
            TensorGroup {
                name: estimator.0,
                sharing: estimator.1,
                len: self.ue.estimator.0.num_params(),
            },
            TensorGroup {
                name: "ec",
                sharing: Sharing::Shared,
                len: self.ec.num_params(),
            },
        ]
    }

    fn visit_shared(&self, f: &mut dyn FnMut(f64)) {
        self.backbone.visit(f);
        self.ue.compact.visit(f);
        self.ue.hgnn.visit(f);
        self.ec.visit(f);
    }

    fn visit_shared_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.backbone.visit_mut(f);
        self.ue.compact.visit_mut(f);
        self.ue.hgnn.visit_mut(f);
        self.ec.visit_mut(f);
    }

    /// All shared tensors, flattened.
    pub fn shared_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_shared(&mut |v| out.push(v));
        out
    }

    pub fn shared_len(&self) -> usize {
        let mut n = 0;
        self.visit_shared(&mut |_| n += 1);
        n
    }

    /// Overwrites shared tensors; the private estimator is untouched.
    pub fn load_shared(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.shared_len();
        if values.len() != expected {
            return Err(Error::Protocol(format!(
                "shared parameter vector has {} entries, model expects {expected}",
                values.len()
            )));
        }
        let mut it = values.iter();
        self.visit_shared_mut(&mut |p| *p = *it.next().unwrap());
        Ok(())
    }

    pub fn private_vector(&self) -> Vec<f64> {
        self.ue.estimator.0.flatten()
    }
}

impl Parameters for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(f64)) {
        self.backbone.visit(f);
        self.ue.visit(f);
        self.ec.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.backbone.visit_mut(f);
        self.ue.visit_mut(f);
        self.ec.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            input: 4,
            deep: 5,
            compact: 3,
            relational: 3,
            estimator_hidden: 2,
            hgnn_layers: 2,
            expr: 4,
            classes: 3,
        }
    }

    #[test]
    fn exactly_the_estimator_is_private() {
        let p = ModelParams::init(&dims(), &mut Rng::new(0));
        let map = p.sharing_map();
        let private: Vec<_> = map.iter().filter(|g| g.sharing == Sharing::Private).collect();
        assert_eq!(private.len(), 1);
        assert_eq!(private[0].name, "ue.estimator");
        let total: usize = map.iter().map(|g| g.len).sum();
        assert_eq!(total, p.num_params());
        assert_eq!(p.shared_len() + private[0].len, total);
    }

    #[test]
    fn load_shared_leaves_estimator() {
        let mut a = ModelParams::init(&dims(), &mut Rng::new(0));
        let b = ModelParams::init(&dims(), &mut Rng::new(1));
        let before = a.private_vector();
        a.load_shared(&b.shared_vector()).unwrap();
        assert_eq!(a.private_vector(), before);
        assert_eq!(a.shared_vector(), b.shared_vector());
        assert!(a.load_shared(&[0.0]).is_err());
    }
}
