//! Minimal dense real-matrix kernel.
//!
//! A [`Matrix`] is the sole numeric container in this crate: weights,
//! gradients, Jacobians and batches of column vectors all live here. Layout
//! is row-major `f64`, and every public operation either returns finite
//! entries or reports an error — non-finite values are never propagated
//! silently.

mod svd;

pub use svd::{singular_extremes, ConditionReport, SVD_DIM_CAP};

use thiserror::Error;

/// Errors from matrix construction and arithmetic.
#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("{op}: shape mismatch between {lhs_rows}x{lhs_cols} and {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("{op}: non-finite entry at ({row}, {col})")]
    NonFinite {
        op: &'static str,
        row: usize,
        col: usize,
    },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("{len} data values do not fill a {rows}x{cols} matrix")]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("jacobi svd did not converge for a {rows}x{cols} matrix after {sweeps} sweeps")]
    SvdNoConvergence {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },
    #[error("singular_extremes supports matrices up to {cap}x{cap}, got {rows}x{cols}")]
    TooLargeForSvd { rows: usize, cols: usize, cap: usize },
}

/// Dense real matrix, row-major `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, validating shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        let m = Matrix { rows, cols, data };
        m.ensure_finite("from_vec")?;
        Ok(m)
    }

    /// Builds a matrix from nested row slices. Convenience for tests and
    /// small literals.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if r == 0 || c == 0 {
            return Err(LinalgError::EmptyShape { rows: r, cols: c });
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::DataLength {
                    rows: r,
                    cols: c,
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    /// All-zeros matrix. Panics on zero dimensions (programmer error).
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Fills a matrix entrywise. The closure receives `(row, col)`.
    /// Entries are not finiteness-checked; callers that may produce
    /// non-finite values should validate afterwards.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    /// Row `i` as a slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Column `j` copied out as a fresh `rows x 1` matrix.
    pub fn column(&self, j: usize) -> Matrix {
        assert!(j < self.cols, "column index out of range");
        let data = (0..self.rows).map(|i| self.get(i, j)).collect();
        Matrix {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn ensure_finite(&self, op: &'static str) -> Result<(), LinalgError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(pos) => Err(LinalgError::NonFinite {
                op,
                row: pos / self.cols,
                col: pos % self.cols,
            }),
        }
    }

    /// Frobenius norm, compensated (Kahan) summation so the relative error
    /// stays at a few ulps independent of the element count.
    pub fn frobenius_norm(&self) -> f64 {
        let mut sum = 0.0;
        let mut comp = 0.0;
        for &v in &self.data {
            let term = v * v;
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        sum.sqrt()
    }

    /// Frobenius inner product `<a, b> = sum_ij a_ij * b_ij`, compensated.
    pub fn inner_product_frobenius(&self, other: &Matrix) -> Result<f64, LinalgError> {
        self.check_same_shape("inner_product_frobenius", other)?;
        let mut sum = 0.0;
        let mut comp = 0.0;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let term = a * b;
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        Ok(sum)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.check_same_shape("add", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        let out = Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        };
        out.ensure_finite("add")?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.check_same_shape("sub", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        let out = Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        };
        out.ensure_finite("sub")?;
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Result<Matrix, LinalgError> {
        let data = self.data.iter().map(|a| a * c).collect();
        let out = Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        };
        out.ensure_finite("scale")?;
        Ok(out)
    }

    /// Matrix product. Delegates the inner kernel to `matrixmultiply`
    /// (deterministic blocked dgemm); the result is finiteness-checked.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut data = vec![0.0; m * n];
        // Safety: buffers are sized m*k, k*n, m*n and strides describe
        // row-major layout; matrixmultiply writes only within c.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let out = Matrix {
            rows: m,
            cols: n,
            data,
        };
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    /// Scales row `i` by `factors[i]`. Used to apply diagonal derivative
    /// matrices without forming them.
    pub fn row_scale(&self, factors: &[f64]) -> Result<Matrix, LinalgError> {
        if factors.len() != self.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "row_scale",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: factors.len(),
                rhs_cols: 1,
            });
        }
        let mut out = self.clone();
        for (i, &f) in factors.iter().enumerate() {
            for v in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *v *= f;
            }
        }
        out.ensure_finite("row_scale")?;
        Ok(out)
    }

    /// Elementwise map; used by nonlinearities. Finiteness is the caller's
    /// concern when the map can blow up.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<(), LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch {
                op,
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        Ok(())
    }
}

/// Frees callers from writing `m.frobenius_norm()` when a function-style
/// reads better in formulas.
pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.frobenius_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn frobenius_identity_2x2_is_sqrt_2() {
        assert_eq!(Matrix::identity(2).frobenius_norm(), 2.0_f64.sqrt());
    }

    #[test]
    fn frobenius_zero_3x4_is_zero() {
        assert_eq!(Matrix::zeros(3, 4).frobenius_norm(), 0.0);
    }

    #[test]
    fn frobenius_3_4_row_is_5() {
        // sqrt(9 + 16) by hand.
        assert_eq!(mat(&[&[3.0, 4.0]]).frobenius_norm(), 5.0);
    }

    #[test]
    fn matmul_identity_is_identity_map() {
        let b = mat(&[&[1.5, -2.0, 0.25], &[0.0, 3.0, -1.0]]);
        let prod = Matrix::identity(2).matmul(&b).unwrap();
        assert_eq!(prod, b);
    }

    #[test]
    fn matmul_known_product() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = mat(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, mat(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn inner_product_with_self_is_squared_norm() {
        let a = mat(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let ip = a.inner_product_frobenius(&a).unwrap();
        let n = a.frobenius_norm();
        assert!((ip - n * n).abs() <= 1e-15 * ip.abs());
    }

    #[test]
    fn transpose_is_involution() {
        let a = mat(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn from_vec_rejects_bad_length_and_nan() {
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0; 3]),
            Err(LinalgError::DataLength { .. })
        ));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite { .. })
        ));
        assert!(matches!(
            Matrix::from_vec(0, 2, vec![]),
            Err(LinalgError::EmptyShape { .. })
        ));
    }

    #[test]
    fn add_overflow_to_infinity_is_an_error() {
        let a = mat(&[&[f64::MAX]]);
        assert!(matches!(
            a.add(&a),
            Err(LinalgError::NonFinite { op: "add", .. })
        ));
    }

    #[test]
    fn row_scale_matches_diagonal_product() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let d = mat(&[&[2.0, 0.0], &[0.0, -1.0]]);
        assert_eq!(a.row_scale(&[2.0, -1.0]).unwrap(), d.matmul(&a).unwrap());
    }

    prop_compose! {
        fn small_matrix(max_dim: usize)(rows in 1..=max_dim, cols in 1..=max_dim)
            (rows in Just(rows), cols in Just(cols),
             data in prop::collection::vec(-10.0f64..10.0, rows * cols))
            -> Matrix {
            Matrix::from_vec(rows, cols, data).unwrap()
        }
    }

    prop_compose! {
        fn matrix_pair(max_dim: usize)(rows in 1..=max_dim, cols in 1..=max_dim)
            (rows in Just(rows), cols in Just(cols),
             a in prop::collection::vec(-10.0f64..10.0, rows * cols),
             b in prop::collection::vec(-10.0f64..10.0, rows * cols))
            -> (Matrix, Matrix) {
            (
                Matrix::from_vec(rows, cols, a).unwrap(),
                Matrix::from_vec(rows, cols, b).unwrap(),
            )
        }
    }

    proptest! {
        #[test]
        fn add_then_sub_roundtrips(pair in matrix_pair(6)) {
            let (a, b) = pair;
            let back = a.add(&b).unwrap().sub(&b).unwrap();
            for (x, y) in back.data().iter().zip(a.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn transpose_preserves_frobenius_norm(a in small_matrix(6)) {
            // Summation order differs between the two traversals.
            let (t, n) = (a.transpose().frobenius_norm(), a.frobenius_norm());
            prop_assert!((t - n).abs() <= 1e-13 * n.max(1.0));
        }

        #[test]
        fn inner_product_is_symmetric(pair in matrix_pair(5)) {
            let (a, b) = pair;
            let ab = a.inner_product_frobenius(&b).unwrap();
            let ba = b.inner_product_frobenius(&a).unwrap();
            prop_assert_eq!(ab, ba);
        }
    }
}
