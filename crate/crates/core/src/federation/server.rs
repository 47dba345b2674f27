use serde::{Deserialize, Serialize};

use super::prototypes::Prototypes;
use crate::error::{Error, Result};

/// How client contributions are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `p_k = n_k / Σ n`.
    DataSize,
    Uniform,
}

/// What a participating client uploads: shared tensors and prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub samples: usize,
    pub shared: Vec<f64>,
    pub prototypes: Prototypes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    /// Last completed round.
    pub round: usize,
    pub global: Vec<f64>,
    pub prototypes: Prototypes,
}

/// Normalized aggregation weights in the order given.
pub fn aggregation_weights(samples: &[usize], weighting: Weighting) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Protocol("aggregation with no participating clients".into()));
    }
    let raw: Vec<f64> = match weighting {
        Weighting::DataSize => samples.iter().map(|&n| n as f64).collect(),
        Weighting::Uniform => vec![1.0; samples.len()],
    };
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::Protocol("participating clients hold no training samples".into()));
    }
    Ok(raw.iter().map(|w| w / total).collect())
}

/// Weighted average of shared tensors, and per-class prototype averages
/// renormalized over the clients that hold each class. Classes nobody
/// contributes this round keep their previous global prototype.
///
/// Updates are processed in client-id order, so the result does not depend
/// on arrival order.
pub fn aggregate(previous: &Prototypes, updates: &[ClientUpdate], weighting: Weighting) -> Result<(Vec<f64>, Prototypes)> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Protocol("duplicate client update".into()));
    }
    let samples: Vec<usize> = sorted.iter().map(|u| u.samples).collect();
    let weights = aggregation_weights(&samples, weighting)?;

    // offset from the first upload so identical inputs average exactly
    let base = &sorted[0].shared;
    let len = base.len();
    let mut global = base.clone();
    for (u, &w) in sorted.iter().zip(&weights) {
        if u.shared.len() != len {
            return Err(Error::Length {
                what: "shared parameters",
                expected: len,
                got: u.shared.len(),
            });
        }
        if u.prototypes.values.shape() != previous.values.shape() {
            return Err(Error::Shape {
                op: "prototype aggregation",
                left: u.prototypes.values.shape(),
                right: previous.values.shape(),
            });
        }
        for ((g, v), b) in global.iter_mut().zip(&u.shared).zip(base) {
            *g += w * (v - b);
        }
    }

    let mut protos = previous.clone();
    for c in 0..previous.classes() {
        let mass: f64 = sorted
            .iter()
            .zip(&weights)
            .filter(|(u, _)| u.prototypes.present[c])
            .map(|(_, w)| w)
            .sum();
        if mass <= 0.0 {
            continue;
        }
        let row = protos.values.row_mut(c);
        row.iter_mut().for_each(|v| *v = 0.0);
        for (u, &w) in sorted.iter().zip(&weights) {
            if u.prototypes.present[c] {
                for (acc, v) in row.iter_mut().zip(u.prototypes.values.row(c)) {
                    *acc += (w / mass) * v;
                }
            }
        }
        protos.present[c] = true;
    }
    Ok((global, protos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Matrix;

    fn update(id: usize, n: usize, shared: Vec<f64>, proto: &[[f64; 2]], present: Vec<bool>) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            samples: n,
            shared,
            prototypes: Prototypes {
                values: Matrix::from_rows(proto),
                present,
            },
        }
    }

    #[test]
    fn data_size_weighting_hand_case() {
        let prev = Prototypes::empty(1, 2);
        let ups = vec![
            update(0, 1, vec![1.0], &[[0.0, 0.0]], vec![false]),
            update(1, 2, vec![4.0], &[[0.0, 0.0]], vec![false]),
            update(2, 1, vec![7.0], &[[0.0, 0.0]], vec![false]),
        ];
        let (g, _) = aggregate(&prev, &ups, Weighting::DataSize).unwrap();
        assert_eq!(g, vec![4.0]);
    }

    #[test]
    fn prototypes_renormalize_over_holders() {
        let prev = Prototypes::empty(2, 2);
        let ups = vec![
            update(0, 1, vec![0.0], &[[1.0, 2.0], [0.0, 0.0]], vec![true, false]),
            update(1, 1, vec![0.0], &[[3.0, 6.0], [5.0, 5.0]], vec![true, true]),
        ];
        let (_, p) = aggregate(&prev, &ups, Weighting::Uniform).unwrap();
        assert_eq!(p.values.row(0), &[2.0, 4.0]);
        assert_eq!(p.values.row(1), &[5.0, 5.0]);
        assert_eq!(p.present, vec![true, true]);
    }

    #[test]
    fn absent_class_keeps_previous_prototype() {
        let mut prev = Prototypes::empty(2, 2);
        prev.values = Matrix::from_rows(&[[9.0, 9.0], [7.0, 7.0]]);
        prev.present = vec![false, true];
        let ups = vec![update(3, 4, vec![1.0], &[[1.0, 1.0], [0.0, 0.0]], vec![true, false])];
        let (_, p) = aggregate(&prev, &ups, Weighting::DataSize).unwrap();
        assert_eq!(p.values.row(0), &[1.0, 1.0]);
        assert_eq!(p.values.row(1), &[7.0, 7.0]);
        assert_eq!(p.present, vec![true, true]);
    }

    #[test]
    fn arrival_order_is_irrelevant() {
        let prev = Prototypes::empty(1, 2);
        let a = update(0, 3, vec![0.1, 0.2], &[[0.3, 0.4]], vec![true]);
        let b = update(5, 7, vec![1.1, -0.2], &[[0.7, 0.1]], vec![true]);
        let c = update(2, 1, vec![-3.0, 0.9], &[[0.0, 0.0]], vec![false]);
        let one = aggregate(&prev, &[a.clone(), b.clone(), c.clone()], Weighting::DataSize).unwrap();
        let two = aggregate(&prev, &[c, a, b], Weighting::DataSize).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn weights_form_a_simplex() {
        let w = aggregation_weights(&[3, 0, 9, 4], Weighting::DataSize).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert_eq!(aggregation_weights(&[5, 6], Weighting::Uniform).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn protocol_errors() {
        let prev = Prototypes::empty(1, 2);
        assert!(aggregate(&prev, &[], Weighting::Uniform).is_err());
        let a = update(1, 1, vec![0.0], &[[0.0, 0.0]], vec![false]);
        assert!(aggregate(&prev, &[a.clone(), a], Weighting::Uniform).is_err());
    }
}
