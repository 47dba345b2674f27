use crate::ec_block::{propagate_with_operator, propagation_system, refine_labels, RefineConfig};
use crate::federation::{aggregate, ClientUpdate, Federation, Prototypes, Weighting};
use crate::hypergraph::{build_knn_hypergraph, hgnn_backward, hgnn_forward, normalized_operator, Hgnn, KernelConfig};
use crate::numcore::{
    finite_diff_grad, max_relative_error, solve_linear, Activation, Matrix, MlpParams, Parameters, Rng,
};
use crate::ue_block::{weight_reg_loss, weighted_ce_loss, WeightRegConfig};

use super::config::ExperimentConfig;
use super::run::{build_federation, run_experiment};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<String, String>;

const CHECKS: [(&str, Check); 9] = [
    ("label_propagation_matches_inverse", propagation_vs_inverse),
    ("operator_spectrum", operator_spectrum),
    ("gradient_mlp", gradient_mlp),
    ("gradient_hgnn", gradient_hgnn),
    ("gradient_weighted_ce", gradient_wce),
    ("gradient_weight_reg", gradient_weight_reg),
    ("aggregation_hand_cases", aggregation_cases),
    ("refinement_truth_table", refinement_table),
    ("estimator_privacy_and_determinism", privacy_and_determinism),
];

/// Runs the built-in invariant suite.
pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { name, passed, detail }
        })
        .collect()
}

fn random_matrix(r: usize, c: usize, rng: &mut Rng) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.normal()).collect()).expect("sized")
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn propagation_vs_inverse() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..12u64 {
        let mut rng = Rng::new(seed);
        let n = 5 + rng.below(30);
        let c = 2 + rng.below(6);
        let lambda = [0.1, 1.0, 10.0][seed as usize % 3];
        let x = random_matrix(n, 4, &mut rng);
        let s = normalized_operator(&build_knn_hypergraph(&x, &KernelConfig::with_neighbors(3)).map_err(err)?)
            .map_err(err)?;
        let y = random_matrix(n, c, &mut rng);
        let fast = propagate_with_operator(&s, &y, lambda).map_err(err)?;
        let inv = solve_linear(&propagation_system(&s, lambda), &Matrix::identity(n)).map_err(err)?;
        let slow = inv.matmul(&y).map_err(err)?;
        worst = worst.max(fast.sub(&slow).map_err(err)?.max_abs());
    }
    if worst <= 1e-8 {
        Ok(format!("max deviation {worst:e}"))
    } else {
        Err(format!("max deviation {worst:e} > 1e-8"))
    }
}

fn power_iteration(s: &Matrix, rng: &mut Rng) -> f64 {
    let mut v = Matrix::new(s.rows(), 1, (0..s.rows()).map(|_| rng.uniform() + 0.1).collect()).expect("sized");
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w = s.matmul(&v).expect("square");
        let norm = w.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm / v.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.scale(1.0 / norm);
    }
    lambda
}

fn operator_spectrum() -> Result<String, String> {
    let mut top: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = Rng::new(1000 + seed);
        let n = 2 + rng.below(40);
        let x = random_matrix(n, 3, &mut rng);
        let s = normalized_operator(
            &build_knn_hypergraph(&x, &KernelConfig::with_neighbors(1 + rng.below(8))).map_err(err)?,
        )
        .map_err(err)?;
        let asym = s.sub(&s.transpose()).map_err(err)?.max_abs();
        if asym > 1e-10 {
            return Err(format!("asymmetry {asym:e} on seed {seed}"));
        }
        top = top.max(power_iteration(&s, &mut rng));
    }
    if top <= 1.0 + 1e-8 {
        Ok(format!("largest eigenvalue {top}"))
    } else {
        Err(format!("largest eigenvalue {top} > 1"))
    }
}

fn grad_verdict(worst: f64) -> Result<String, String> {
    if worst <= 1e-4 {
        Ok(format!("max relative error {worst:e}"))
    } else {
        Err(format!("max relative error {worst:e} > 1e-4"))
    }
}

fn gradient_mlp() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = Rng::new(seed);
        let mut p = MlpParams::init(&[3, 5, 2], &[Activation::Prelu, Activation::Sigmoid], &mut rng);
        p.visit_mut(&mut |v| *v += 0.1 * rng.normal());
        let x = random_matrix(4, 3, &mut rng);
        let up = random_matrix(4, 2, &mut rng);
        let loss = |q: &MlpParams| -> f64 {
            let out = q.predict(&x).expect("shapes");
            out.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = p.forward(&x).map_err(err)?;
        let (g, _) = p.backward(&cache, &up).map_err(err)?;
        let numeric = finite_diff_grad(
            |t| {
                let mut q = p.clone();
                q.assign(t).expect("len");
                loss(&q)
            },
            &p.flatten(),
            1e-5,
        );
        worst = worst.max(max_relative_error(&g.flatten(), &numeric));
    }
    grad_verdict(worst)
}

fn gradient_hgnn() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = Rng::new(50 + seed);
        let x = random_matrix(6, 3, &mut rng);
        let s = normalized_operator(&build_knn_hypergraph(&x, &KernelConfig::with_neighbors(2)).map_err(err)?)
            .map_err(err)?;
        let net = Hgnn::init(&[3, 4, 2], &mut rng);
        let up = random_matrix(6, 2, &mut rng);
        let (_, cache) = hgnn_forward(&x, &s, &net).map_err(err)?;
        let (g, _) = hgnn_backward(&net, &cache, &up).map_err(err)?;
        let numeric = finite_diff_grad(
            |t| {
                let mut q = net.clone();
                q.assign(t).expect("len");
                let (out, _) = hgnn_forward(&x, &s, &q).expect("shapes");
                out.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum()
            },
            &net.flatten(),
            1e-5,
        );
        worst = worst.max(max_relative_error(&g.flatten(), &numeric));
    }
    grad_verdict(worst)
}

fn gradient_wce() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = Rng::new(70 + seed);
        let logits = random_matrix(5, 4, &mut rng);
        let labels: Vec<usize> = (0..5).map(|_| rng.below(4)).collect();
        let beta: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
        let out = weighted_ce_loss(&logits, &labels, &beta).map_err(err)?;
        let mut theta = logits.as_slice().to_vec();
        theta.extend_from_slice(&beta);
        let numeric = finite_diff_grad(
            |t| {
                let l = Matrix::new(5, 4, t[..20].to_vec()).expect("sized");
                weighted_ce_loss(&l, &labels, &t[20..]).expect("shapes").loss
            },
            &theta,
            1e-5,
        );
        let mut analytic = out.grad_logits.as_slice().to_vec();
        analytic.extend_from_slice(&out.grad_beta);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    grad_verdict(worst)
}

fn gradient_weight_reg() -> Result<String, String> {
    let cfg = WeightRegConfig {
        margin: 0.9,
        ..WeightRegConfig::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = Rng::new(90 + seed);
        let beta: Vec<f64> = (0..10).map(|_| rng.uniform()).collect();
        let out = weight_reg_loss(&beta, &cfg);
        let numeric = finite_diff_grad(|t| weight_reg_loss(t, &cfg).loss, &beta, 1e-5);
        worst = worst.max(max_relative_error(&out.grad_beta, &numeric));
    }
    grad_verdict(worst)
}

fn aggregation_cases() -> Result<String, String> {
    let update = |id, n, v: f64| ClientUpdate {
        client_id: id,
        samples: n,
        shared: vec![v],
        prototypes: Prototypes::empty(1, 1),
    };
    let prev = Prototypes::empty(1, 1);
    let ups = [update(0, 1, 1.0), update(1, 2, 4.0), update(2, 1, 7.0)];
    let (g, _) = aggregate(&prev, &ups, Weighting::DataSize).map_err(err)?;
    if g != [4.0] {
        return Err(format!("data-size mean {g:?}, expected [4.0]"));
    }
    let (g, _) = aggregate(&prev, &ups, Weighting::Uniform).map_err(err)?;
    if g != [4.0] {
        return Err(format!("uniform mean {g:?}, expected [4.0]"));
    }
    Ok("weighted and uniform means exact".into())
}

fn refinement_table() -> Result<String, String> {
    let cfg = RefineConfig::default();
    let mut cases = 0;
    for beta in [0.3, 0.6, 0.9] {
        for (lp, ls) in [(1, 1), (1, 2), (0, 0)] {
            for orig in [0, 1] {
                let r = refine_labels(&[beta], &[lp], &[ls], &[orig], &cfg).map_err(err)?;
                let expected = if beta >= cfg.threshold && lp == ls { lp } else { orig };
                if r.labels[0] != expected {
                    return Err(format!("beta={beta} lp={lp} ls={ls} orig={orig} gave {}", r.labels[0]));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases"))
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        client_count: 4,
        rounds: 2,
        classes: 3,
        feature_dim: 6,
        per_class: 30,
        neighbors: 4,
        deep_dim: 8,
        compact_dim: 6,
        relational_dim: 6,
        estimator_hidden: 4,
        expr_dim: 8,
        ..ExperimentConfig::default()
    }
}

fn check_private(fed: &mut Federation) -> Result<(), String> {
    for round in 1..=2 {
        let selected = fed.select_clients(round);
        fed.broadcast(&selected).map_err(err)?;
        fed.train_clients(round, &selected).map_err(err)?;
        let before: Vec<Vec<f64>> = fed.clients.iter().map(|c| c.params.private_vector()).collect();
        fed.aggregate(&selected).map_err(err)?;
        fed.server.round = round;
        if fed.clients.iter().zip(&before).any(|(c, b)| &c.params.private_vector() != b) {
            return Err(format!("estimator changed by aggregation in round {round}"));
        }
    }
    Ok(())
}

fn privacy_and_determinism() -> Result<String, String> {
    let cfg = tiny_config();
    check_private(&mut build_federation(&cfg).map_err(err)?)?;
    let a = run_experiment(&cfg).map_err(err)?;
    let b = run_experiment(&cfg).map_err(err)?;
    if a != b {
        return Err("two identical runs produced different metrics".into());
    }
    Ok(format!("{} metric rows reproduced", a.len()))
}
