//! Direct dense solvers.
//!
//! Systems here are at most a few hundred unknowns (one training batch), so
//! plain O(n³) factorizations are used.

use super::matrix::Matrix;
use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-12;

/// Which factorization to use for `a · x = b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveKind {
    /// Partial-pivot Gaussian elimination.
    General,
    /// Cholesky; `a` must be symmetric positive definite.
    SymmetricPositiveDefinite,
}

fn check_system(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != a.cols() || a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "solve_linear",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Solves `a · x = b` by partial-pivot elimination.
pub fn solve_linear(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    solve_with(a, b, SolveKind::General)
}

/// Solves `a · x = b` for symmetric positive definite `a` via Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    solve_with(a, b, SolveKind::SymmetricPositiveDefinite)
}

pub fn solve_with(a: &Matrix, b: &Matrix, kind: SolveKind) -> Result<Matrix> {
    check_system(a, b)?;
    match kind {
        SolveKind::General => lu_solve(a, b),
        SolveKind::SymmetricPositiveDefinite => {
            let l = cholesky(a)?;
            Ok(cholesky_solve(&l, b))
        }
    }
}

fn lu_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let m = b.cols();
    let mut lu = a.clone();
    let mut x = b.clone();
    let scale = lu.max_abs().max(1.0);

    for k in 0..n {
        let (p, pivot_abs) = (k..n)
            .map(|r| (r, lu.get(r, k).abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_abs < PIVOT_TOL * scale {
            return Err(Error::Singular {
                row: k,
                pivot: pivot_abs,
            });
        }
        if p != k {
            for c in 0..n {
                let tmp = lu.get(k, c);
                lu.set(k, c, lu.get(p, c));
                lu.set(p, c, tmp);
            }
            for c in 0..m {
                let tmp = x.get(k, c);
                x.set(k, c, x.get(p, c));
                x.set(p, c, tmp);
            }
        }
        let pivot = lu.get(k, k);
        for r in (k + 1)..n {
            let factor = lu.get(r, k) / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in k..n {
                let v = lu.get(r, c) - factor * lu.get(k, c);
                lu.set(r, c, v);
            }
            for c in 0..m {
                let v = x.get(r, c) - factor * x.get(k, c);
                x.set(r, c, v);
            }
        }
    }

    for k in (0..n).rev() {
        let pivot = lu.get(k, k);
        for c in 0..m {
            let mut acc = x.get(k, c);
            for j in (k + 1)..n {
                acc -= lu.get(k, j) * x.get(j, c);
            }
            x.set(k, c, acc / pivot);
        }
    }
    Ok(x)
}

/// Lower-triangular factor `l` with `a = l · lᵀ`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::Shape {
            op: "cholesky",
            left: a.shape(),
            right: a.shape(),
        });
    }
    let scale = a.max_abs().max(1.0);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if diag < PIVOT_TOL * scale {
            return Err(Error::Singular { row: j, pivot: diag });
        }
        let d = diag.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut acc = a.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, acc / d);
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let m = b.cols();
    let mut y = b.clone();
    // forward: l · y = b
    for i in 0..n {
        for c in 0..m {
            let mut acc = y.get(i, c);
            for k in 0..i {
                acc -= l.get(i, k) * y.get(k, c);
            }
            y.set(i, c, acc / l.get(i, i));
        }
    }
    // backward: lᵀ · x = y
    for i in (0..n).rev() {
        for c in 0..m {
            let mut acc = y.get(i, c);
            for k in (i + 1)..n {
                acc -= l.get(k, i) * y.get(k, c);
            }
            y.set(i, c, acc / l.get(i, i));
        }
    }
    y
}
