use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Per-class mean expression features. Rows of absent classes are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub values: Matrix,
    pub present: Vec<bool>,
}

impl Prototypes {
    pub fn empty(classes: usize, dim: usize) -> Self {
        Self {
            values: Matrix::zeros(classes, dim),
            present: vec![false; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.present.len()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

fn class_counts(labels: &[usize], classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l + 1, classes });
        }
        counts[l] += 1;
    }
    Ok(counts)
}

/// Mean of `features` rows grouped by label.
pub fn compute_prototypes(features: &Matrix, labels: &[usize], classes: usize) -> Result<Prototypes> {
    if labels.len() != features.rows() {
        return Err(Error::Length {
            what: "prototype labels",
            expected: features.rows(),
            got: labels.len(),
        });
    }
    let counts = class_counts(labels, classes)?;
    let mut values = Matrix::zeros(classes, features.cols());
    for (i, &l) in labels.iter().enumerate() {
        for (acc, v) in values.row_mut(l).iter_mut().zip(features.row(i)) {
            *acc += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            for v in values.row_mut(c) {
                *v /= n as f64;
            }
        }
    }
    Ok(Prototypes {
        values,
        present: counts.iter().map(|&n| n > 0).collect(),
    })
}

/// Distance between a local and a global prototype.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeDistance {
    /// `Σ_d |a_d − b_d|`.
    L1Sum,
    /// `Σ_d |a_d − b_d| / D`.
    L1Mean,
}

impl PrototypeDistance {
    fn scale(self, dim: usize) -> f64 {
        match self {
            PrototypeDistance::L1Sum => 1.0,
            PrototypeDistance::L1Mean => 1.0 / dim.max(1) as f64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PrototypeLoss {
    pub loss: f64,
    /// Gradient with respect to each feature row.
    pub grad_features: Matrix,
    /// Classes that entered the mean.
    pub matched: usize,
}

/// `(1/C)·Σ_j d(c_j, c̄_j)` between batch and global prototypes, summed
/// over classes present in both.
pub fn prototype_loss(
    features: &Matrix,
    labels: &[usize],
    global: &Prototypes,
    distance: PrototypeDistance,
) -> Result<PrototypeLoss> {
    if features.cols() != global.dim() {
        return Err(Error::Shape {
            op: "prototype_loss",
            left: features.shape(),
            right: global.values.shape(),
        });
    }
    let local = compute_prototypes(features, labels, global.classes())?;
    let counts = class_counts(labels, global.classes())?;
    let matched: Vec<usize> = (0..global.classes())
        .filter(|&c| local.present[c] && global.present[c])
        .collect();
    let mut grad_features = Matrix::zeros(features.rows(), features.cols());
    if matched.is_empty() {
        return Ok(PrototypeLoss {
            loss: 0.0,
            grad_features,
            matched: 0,
        });
    }
    let m = global.classes() as f64 / distance.scale(global.dim());
    let mut loss = 0.0;
    let mut sign = Matrix::zeros(global.classes(), global.dim());
    for &c in &matched {
        for ((s, a), b) in sign.row_mut(c).iter_mut().zip(local.values.row(c)).zip(global.values.row(c)) {
            let d = a - b;
            loss += d.abs();
            *s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    for (i, &l) in labels.iter().enumerate() {
        if global.present[l] {
            let scale = 1.0 / (m * counts[l] as f64);
            for (g, s) in grad_features.row_mut(i).iter_mut().zip(sign.row(l)) {
                *g = s * scale;
            }
        }
    }
    Ok(PrototypeLoss {
        loss: loss / m,
        grad_features,
        matched: matched.len(),
    })
}
