//! Normal-equation least squares via Cholesky.

/// Solves `A x = b` for symmetric positive-definite `A` (row-major,
/// `n x n`). Returns `None` when a pivot falls below `1e-12` times the
/// largest diagonal entry, i.e. when `A` is numerically rank deficient.
pub fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let max_diag = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    cholesky_with_floor(a, b, n, 1e-12 * max_diag.max(f64::MIN_POSITIVE))
}

fn cholesky_with_floor(a: &[f64], b: &[f64], n: usize, floor: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= floor {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s = b[i] - (0..i).map(|k| l[i * n + k] * z[k]).sum::<f64>();
        z[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s = z[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>();
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

/// Gram matrix `X^T X` and `X^T y` for row-major `X [rows x p]`.
pub fn normal_equations(x: &[f64], y: &[f64], p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for (row, &yi) in x.chunks(p).zip(y) {
        for i in 0..p {
            xty[i] += row[i] * yi;
            for j in 0..p {
                xtx[i * p + j] += row[i] * row[j];
            }
        }
    }
    (xtx, xty)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub coef: Vec<f64>,
    /// Set when the plain normal equations were singular and a ridge
    /// penalty was added.
    pub ridge: Option<f64>,
}

/// Ordinary least squares, falling back to ridge `penalty` on rank
/// deficiency. Returns `None` only if the ridge system also fails.
pub fn least_squares(x: &[f64], y: &[f64], p: usize, penalty: f64) -> Option<LeastSquares> {
    let (mut xtx, xty) = normal_equations(x, y, p);
    if let Some(coef) = cholesky_solve(&xtx, &xty, p) {
        return Some(LeastSquares { coef, ridge: None });
    }
    for i in 0..p {
        xtx[i * p + i] += penalty;
    }
    cholesky_with_floor(&xtx, &xty, p, 0.0).map(|coef| LeastSquares {
        coef,
        ridge: Some(penalty),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_spd_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let x = cholesky_solve(&a, &[2.0, 1.0], 2).unwrap();
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-12);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_column_triggers_ridge() {
        // Two identical columns.
        let x = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        let y = [2.0, 4.0, 6.0];
        let fit = least_squares(&x, &y, 2, 1e-8).unwrap();
        assert_eq!(fit.ridge, Some(1e-8));
        assert!((fit.coef[0] + fit.coef[1] - 2.0).abs() < 1e-6);
    }
}
