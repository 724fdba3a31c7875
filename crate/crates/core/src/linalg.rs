//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Minimum accepted Cholesky pivot, relative to the largest diagonal entry.
/// Relative so that `eps * I` stays SPD for any `eps > 0`.
pub const PIVOT_TOL: f64 = 1e-10;

/// Relative singular-value threshold used for numerical rank.
pub const RANK_RTOL: f64 = 1e-8;

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// `name` is used in the error message so callers can tell which matrix failed.
pub fn cholesky_spd(a: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::Spec(format!(
            "{name}: expected a non-empty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0_f64, f64::max);
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::Spec(format!("{name} is not symmetric at ({i},{j})")));
            }
        }
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > PIVOT_TOL * scale) {
            return Err(Error::Spec(format!(
                "{name} is not positive definite (pivot {j} = {d:e})"
            )));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Draw `mean + L z` with `z ~ N(0, I)`.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + chol * z
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank: number of singular values above `rtol * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rtol: f64) -> usize {
    let s = singular_values(m);
    let Some(&max) = s.first() else { return 0 };
    if max == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rtol * max).count()
}

pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let ncols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.4, 2.0, 3.0, 0.5, 0.4, 0.5, 1.0]);
        let l = cholesky_spd(&a, "a").unwrap();
        let diff = (&l * l.transpose() - &a).abs().max();
        assert!(diff < 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite_and_names_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = cholesky_spd(&a, "sigma_ns").unwrap_err().to_string();
        assert!(err.contains("sigma_ns"), "{err}");
    }

    #[test]
    fn tiny_scaled_identity_is_spd() {
        let a = DMatrix::<f64>::identity(3, 3) * 1e-12;
        assert!(cholesky_spd(&a, "eps").is_ok());
        assert!(cholesky_spd(&DMatrix::zeros(2, 2), "zero").is_err());
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(cholesky_spd(&a, "m").is_err());
    }

    #[test]
    fn rank_of_outer_product_is_one() {
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &u * u.transpose();
        assert_eq!(numerical_rank(&m, RANK_RTOL), 1);
        assert_eq!(numerical_rank(&DMatrix::identity(4, 4), RANK_RTOL), 4);
        assert_eq!(numerical_rank(&DMatrix::zeros(2, 2), RANK_RTOL), 0);
    }
}
