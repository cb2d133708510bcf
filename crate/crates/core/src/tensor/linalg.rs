//! Cholesky factorization and the SPD solves built on it.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Relative tolerance on `|a_ij - a_ji|` accepted as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Checks near-symmetry and returns `(A + Aᵀ)/2`.
pub fn symmetrized_spd_input(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::dim(format!(
            "expected a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let n = a.rows();
    let scale = a.data().iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidInput(format!(
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    a.symmetrize()
}

/// Lower-triangular `L` with `L·Lᵀ = A`.
///
/// A pivot at or below `n·ε·max|a_jj|` counts as a failure, so numerically
/// singular inputs are rejected instead of producing a huge inverse.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let a = symmetrized_spd_input(a)?;
    let n = a.rows();
    let floor = n as f64 * f64::EPSILON * a.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= floor || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L·X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    if b.rows() != n {
        return Err(Error::dim(format!("solve: {n}x{n} against {} rows", b.rows())));
    }
    let p = b.cols();
    let mut x = b.clone();
    for c in 0..p {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Solves `Lᵀ·X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    if b.rows() != n {
        return Err(Error::dim(format!("solve: {n}x{n} against {} rows", b.rows())));
    }
    let p = b.cols();
    let mut x = b.clone();
    for c in 0..p {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Solves `A·X = B` given the Cholesky factor of `A`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let y = solve_lower(l, b)?;
    solve_lower_transpose(l, &y)
}

pub fn logdet_from_cholesky(l: &Matrix) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn inverse_from_cholesky(l: &Matrix) -> Result<Matrix> {
    let inv = cholesky_solve(l, &Matrix::identity(l.rows()))?;
    inv.symmetrize()
}

/// `log det A` for symmetric positive definite `A`.
pub fn logdet_spd(a: &Matrix) -> Result<f64> {
    Ok(logdet_from_cholesky(&cholesky(a)?))
}

/// `A⁻¹·B` for symmetric positive definite `A`.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    cholesky_solve(&cholesky(a)?, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let m = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        m.t_matmul(&m).unwrap().add(&Matrix::identity(n)).unwrap()
    }

    #[test]
    fn diagonal_factor() {
        let l = cholesky(&Matrix::diag(&[4.0, 9.0])).unwrap();
        assert_eq!(l, Matrix::diag(&[2.0, 3.0]));
    }

    #[test]
    fn indefinite_input_names_pivot() {
        let err = cholesky(&Matrix::diag(&[1.0, -1.0])).unwrap_err();
        match err {
            Error::NotPositiveDefinite { pivot, .. } => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn asymmetric_input_rejected() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(cholesky(&a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn reconstruction_of_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_spd(5, &mut rng);
            let l = cholesky(&a).unwrap();
            let rec = l.matmul_t(&l).unwrap();
            let rel = rec.sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(rel < 1e-12, "relative reconstruction error {rel}");
            for i in 0..5 {
                for j in (i + 1)..5 {
                    assert_eq!(l[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn refactoring_a_reconstruction_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_spd(4, &mut rng);
            let l1 = cholesky(&a).unwrap();
            let a1 = l1.matmul_t(&l1).unwrap();
            let l2 = cholesky(&a1).unwrap();
            let a2 = l2.matmul_t(&l2).unwrap();
            let rel = a2.sub(&a1).unwrap().frobenius_norm() / a1.frobenius_norm();
            assert!(rel < 1e-12);
        }
    }

    #[test]
    fn logdet_examples() {
        assert_eq!(logdet_spd(&Matrix::identity(3)).unwrap(), 0.0);
        let v = logdet_spd(&Matrix::diag(&[2.0, 3.0])).unwrap();
        assert!((v - 6.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logdet_of_inverse_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_spd(4, &mut rng);
            let inv = solve_spd(&a, &Matrix::identity(4)).unwrap().symmetrize().unwrap();
            let s = logdet_spd(&a).unwrap() + logdet_spd(&inv).unwrap();
            assert!(s.abs() < 1e-8, "{s}");
        }
    }

    #[test]
    fn solve_examples() {
        let b = Matrix::column(&[3.0, -1.0]);
        assert_eq!(solve_spd(&Matrix::identity(2), &b).unwrap(), b);
        let x = solve_spd(&Matrix::diag(&[2.0, 4.0]), &Matrix::column(&[2.0, 4.0])).unwrap();
        assert!(x.max_abs_diff(&Matrix::column(&[1.0, 1.0])) < 1e-15);
    }

    #[test]
    fn solve_residual_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_spd(4, &mut rng);
            let b = Matrix::from_fn(4, 2, |_, _| rng.random_range(-3.0..3.0));
            let x = solve_spd(&a, &b).unwrap();
            let r = a.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm();
            assert!(r < 1e-10, "residual {r}");
        }
    }
}
