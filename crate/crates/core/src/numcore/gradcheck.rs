/// Central-difference gradient of `loss` at `theta`.
pub fn finite_diff_grad<F>(mut loss: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut point = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = point[i];
            point[i] = orig + h;
            let up = loss(&point);
            point[i] = orig - h;
            let down = loss(&point);
            point[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Coordinates smaller than this are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, RELATIVE_ERROR_FLOOR)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(max_relative_error(&[1.0], &[1.0]), 0.0);
        assert!((max_relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert!(max_relative_error(&[1e-9], &[0.0]) < 1e-4);
    }
}
