//! Numeric building blocks: dense matrices, direct solvers, MLP layers,
//! a deterministic random stream and a finite-difference gradient oracle.

pub mod gradcheck;
pub mod linalg;
pub mod matrix;
pub mod mlp;
pub mod params;
pub mod rng;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use linalg::{cholesky, solve_linear, solve_spd, solve_with, SolveKind};
pub use matrix::{dot, mat_mul, pairwise_sq_dist, softmax_rows, Matrix};
pub use mlp::{sigmoid, Activation, DenseLayer, MlpCache, MlpParams};
pub use params::Parameters;
pub use rng::Rng;
