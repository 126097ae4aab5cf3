//! Singular-value extremes via one-sided Jacobi.
//!
//! The routine orthogonalizes the min(rows, cols) vectors of the input by
//! cyclic Jacobi rotations, so the Gram matrix it implicitly diagonalizes
//! always has the smaller dimension. One-sided Jacobi delivers small singular
//! values to high relative accuracy, which a power-iteration scheme cannot;
//! that is what makes the measured condition numbers trustworthy.

use super::{LinalgError, Matrix};

/// Hard cap on the Gram dimension; everything in this crate is far below it.
pub const SVD_DIM_CAP: usize = 2048;

const MAX_SWEEPS: usize = 128;
const ORTHOGONALITY_TOL: f64 = 1e-14;

/// Largest and smallest singular values together with their ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionReport {
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// `sigma_max / sigma_min`, or `+inf` when `sigma_min` is zero.
    pub kappa: f64,
}

impl ConditionReport {
    fn new(sigma_max: f64, sigma_min: f64) -> Self {
        debug_assert!(sigma_max >= sigma_min && sigma_min >= 0.0);
        let kappa = if sigma_min > 0.0 {
            sigma_max / sigma_min
        } else {
            f64::INFINITY
        };
        ConditionReport {
            sigma_max,
            sigma_min,
            kappa,
        }
    }

    pub fn kappa_is_finite(&self) -> bool {
        self.kappa.is_finite()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Compensated squared norm of a slice.
fn norm_sq(a: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in a {
        let term = v * v;
        let y = term - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Computes `sigma_max`, `sigma_min` and the condition number of `m`.
///
/// Errors if the Jacobi sweeps fail to converge (the error names the matrix
/// shape) or if the matrix exceeds [`SVD_DIM_CAP`].
pub fn singular_extremes(m: &Matrix) -> Result<ConditionReport, LinalgError> {
    let (rows, cols) = m.shape();
    if rows.max(cols) > SVD_DIM_CAP {
        return Err(LinalgError::TooLargeForSvd {
            rows,
            cols,
            cap: SVD_DIM_CAP,
        });
    }

    // Store the vectors to orthogonalize as contiguous rows: n vectors of
    // length len, n = min(rows, cols).
    let work = if rows >= cols { m.transpose() } else { m.clone() };
    let n = work.rows();
    let len = work.cols();
    let mut v = work.data().to_vec();

    if n == 1 {
        let sigma = norm_sq(&v).sqrt();
        return Ok(ConditionReport::new(sigma, sigma));
    }

    let mut converged = false;
    for sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (head, tail) = v.split_at_mut(q * len);
                let rp = &mut head[p * len..(p + 1) * len];
                let rq = &mut tail[..len];

                let app = norm_sq(rp);
                let aqq = norm_sq(rq);
                let apq = dot(rp, rq);
                if apq == 0.0 || app == 0.0 || aqq == 0.0 {
                    continue;
                }
                if apq * apq <= ORTHOGONALITY_TOL * ORTHOGONALITY_TOL * app * aqq {
                    continue;
                }
                rotated = true;

                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (xp, xq) in rp.iter_mut().zip(rq.iter_mut()) {
                    let a = *xp;
                    let b = *xq;
                    *xp = c * a - s * b;
                    *xq = s * a + c * b;
                }
            }
        }
        if !rotated {
            converged = true;
            let _ = sweep;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::SvdNoConvergence {
            rows,
            cols,
            sweeps: MAX_SWEEPS,
        });
    }

    let mut sigma_max = 0.0_f64;
    let mut sigma_min = f64::INFINITY;
    for i in 0..n {
        let sigma = norm_sq(&v[i * len..(i + 1) * len]).sqrt();
        sigma_max = sigma_max.max(sigma);
        sigma_min = sigma_min.min(sigma);
    }
    Ok(ConditionReport::new(sigma_max, sigma_min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Independent oracle: sigma_max^2 via power iteration on `A^T A`.
    fn sigma_max_power_iteration(a: &Matrix, iters: usize) -> f64 {
        let ata = a.transpose().matmul(a).unwrap();
        let n = ata.rows();
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        for _ in 0..iters {
            let mut w = vec![0.0; n];
            for i in 0..n {
                w[i] = dot(ata.row(i), &v);
            }
            let norm = norm_sq(&w).sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            for x in &mut w {
                *x /= norm;
            }
            v = w;
        }
        let mut w = vec![0.0; n];
        for i in 0..n {
            w[i] = dot(ata.row(i), &v);
        }
        dot(&v, &w).max(0.0).sqrt()
    }

    #[test]
    fn diagonal_2_1() {
        let r = singular_extremes(&mat(&[&[2.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!((r.sigma_max - 2.0).abs() < 1e-12);
        assert!((r.sigma_min - 1.0).abs() < 1e-12);
        assert!((r.kappa - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_matrix_has_kappa_one() {
        let (c, s) = (0.6, 0.8);
        let r = singular_extremes(&mat(&[&[c, -s], &[s, c]])).unwrap();
        assert!((r.kappa - 1.0).abs() < 1e-12, "kappa = {}", r.kappa);
    }

    #[test]
    fn shear_matrix_matches_quadratic_formula_oracle() {
        // Eigenvalues of M^T M for M = [[1,1],[0,1]]: M^T M = [[1,1],[1,2]],
        // trace 3, det 1, so lambda = (3 +- sqrt(5)) / 2.
        let lam_max = (3.0 + 5.0_f64.sqrt()) / 2.0;
        let lam_min = (3.0 - 5.0_f64.sqrt()) / 2.0;
        let expected_kappa = (lam_max / lam_min).sqrt();
        let r = singular_extremes(&mat(&[&[1.0, 1.0], &[0.0, 1.0]])).unwrap();
        assert!((r.kappa - expected_kappa).abs() <= 1e-9 * expected_kappa);
        assert!((r.sigma_max - lam_max.sqrt()).abs() <= 1e-9);
        assert!((r.sigma_min - lam_min.sqrt()).abs() <= 1e-9);
        // The quadratic formula happens to give kappa = lambda_max here.
        assert!((expected_kappa - (3.0 + 5.0_f64.sqrt()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_reports_infinite_kappa() {
        let r = singular_extremes(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(r.sigma_max, 0.0);
        assert_eq!(r.sigma_min, 0.0);
        assert!(r.kappa.is_infinite());
        assert!(!r.kappa_is_finite());
    }

    #[test]
    fn rank_deficient_matrix_reports_infinite_kappa() {
        // Second row is twice the first.
        let r = singular_extremes(&mat(&[&[1.0, 2.0], &[2.0, 4.0]])).unwrap();
        assert!(r.sigma_min <= 1e-12 * r.sigma_max);
    }

    #[test]
    fn wide_and_tall_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 3, 5);
        let ra = singular_extremes(&a).unwrap();
        let rt = singular_extremes(&a.transpose()).unwrap();
        assert!((ra.sigma_max - rt.sigma_max).abs() <= 1e-10 * ra.sigma_max);
        assert!((ra.sigma_min - rt.sigma_min).abs() <= 1e-10 * ra.sigma_max);
    }

    #[test]
    fn dimension_cap_is_enforced() {
        let m = Matrix::zeros(SVD_DIM_CAP + 1, 1);
        assert!(matches!(
            singular_extremes(&m),
            Err(LinalgError::TooLargeForSvd { .. })
        ));
    }

    #[test]
    fn sigma_max_matches_power_iteration_on_seeded_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..50 {
            let rows = 1 + (trial % 6);
            let cols = 1 + (trial % 5);
            let a = random_matrix(&mut rng, rows, cols);
            let r = singular_extremes(&a).unwrap();
            let oracle = sigma_max_power_iteration(&a, 300);
            assert!(
                (r.sigma_max - oracle).abs() <= 1e-6 * oracle.max(1e-12),
                "trial {trial}: jacobi {} vs power iteration {oracle}",
                r.sigma_max
            );
        }
    }

    proptest! {
        #[test]
        fn product_norm_bounded_by_sigma_max(
            a_data in prop::collection::vec(-2.0f64..2.0, 12),
            b_data in prop::collection::vec(-2.0f64..2.0, 12),
        ) {
            let a = Matrix::from_vec(3, 4, a_data).unwrap();
            let b = Matrix::from_vec(4, 3, b_data).unwrap();
            let lhs = a.matmul(&b).unwrap().frobenius_norm();
            let rhs = singular_extremes(&a).unwrap().sigma_max * b.frobenius_norm();
            prop_assert!(lhs <= rhs * (1.0 + 1e-9) + 1e-300);
        }

        #[test]
        fn kappa_is_scale_invariant(
            data in prop::collection::vec(-3.0f64..3.0, 9),
            c in prop::sample::select(vec![-4.0f64, -0.5, 0.125, 2.0, 10.0]),
        ) {
            let a = Matrix::from_vec(3, 3, data).unwrap();
            let ka = singular_extremes(&a).unwrap().kappa;
            let kca = singular_extremes(&a.scale(c).unwrap()).unwrap().kappa;
            if ka.is_finite() {
                prop_assert!((ka - kca).abs() <= 1e-9 * ka, "{ka} vs {kca}");
            } else {
                prop_assert!(!kca.is_finite() || kca > 1e12);
            }
        }

        #[test]
        fn frobenius_squared_lies_between_sigma_bounds(
            data in prop::collection::vec(-3.0f64..3.0, 12),
        ) {
            let a = Matrix::from_vec(4, 3, data).unwrap();
            let r = singular_extremes(&a).unwrap();
            let fro2 = a.frobenius_norm().powi(2);
            let k = 3.0; // min(rows, cols)
            prop_assert!(fro2 >= r.sigma_min.powi(2) * k * (1.0 - 1e-9));
            prop_assert!(fro2 <= r.sigma_max.powi(2) * k * (1.0 + 1e-9));
        }
    }
}
