//! Small dense symmetric-positive-definite solves (latent dimension sized).

use crate::error::{Error, Result};
use crate::real::Real;

/// Lower Cholesky factor of the row-major `n × n` SPD matrix `a`.
pub fn cholesky<R: Real>(a: &[R], n: usize) -> Result<Vec<R>> {
    let mut l = vec![R::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > R::zero()) || !sum.is_finite() {
                    return Err(Error::Singular(format!("matrix not positive definite at pivot {i}")));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor `L`.
pub fn cholesky_solve<R: Real>(l: &[R], n: usize, b: &[R]) -> Vec<R> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] = y[i] - l[i * n + k] * y[k];
        }
        y[i] = y[i] / l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] = y[i] - l[k * n + i] * y[k];
        }
        y[i] = y[i] / l[i * n + i];
    }
    y
}

/// Inverse of an SPD matrix from its Cholesky factor.
pub fn cholesky_inverse<R: Real>(l: &[R], n: usize) -> Vec<R> {
    let mut inv = vec![R::zero(); n * n];
    let mut e = vec![R::zero(); n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = R::zero());
        e[j] = R::one();
        let col = cholesky_solve(l, n, &e);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    inv
}

/// `log det A` from its Cholesky factor.
pub fn cholesky_log_det<R: Real>(l: &[R], n: usize) -> R {
    (0..n).map(|i| l[i * n + i].ln()).sum::<R>() * R::lit(2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_and_inverse() {
        let a = [4.0f64, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        let x = cholesky_solve(&l, 3, &[1.0, 2.0, 3.0]);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
            assert!((r - [1.0, 2.0, 3.0][i]).abs() < 1e-12);
        }
        let inv = cholesky_inverse(&l, 3);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                assert!((r - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let det = 4.0 * (5.0 * 3.0 - 1.0) - 2.0 * (2.0 * 3.0 - 0.6) + 0.6 * (2.0 - 5.0 * 0.6);
        assert!((cholesky_log_det(&l, 3) - f64::ln(det)).abs() < 1e-12);
    }

    #[test]
    fn indefinite_rejected() {
        assert!(cholesky(&[1.0f64, 2.0, 2.0, 1.0], 2).is_err());
    }
}
