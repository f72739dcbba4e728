//! Small dense linear algebra used by the i-vector and backend math.
//!
//! Containers are ndarray everywhere in this crate; the decompositions
//! (Cholesky, symmetric eigen, QR/SVD for subspace angles) are delegated to
//! nalgebra, which ships pure-Rust implementations. Matrices here are tiny
//! (at most a few hundred rows), so the conversion copies are irrelevant.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

fn to_na(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Cholesky factor of a symmetric positive-definite matrix.
pub struct CholFactor {
    inner: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

pub fn cholesky(a: ArrayView2<f64>, context: &'static str) -> Result<CholFactor> {
    if a.nrows() != a.ncols() {
        return Err(Error::shape(
            context,
            format!("matrix is {}x{}, expected square", a.nrows(), a.ncols()),
        ));
    }
    let m = to_na(a);
    match nalgebra::Cholesky::new(m) {
        Some(inner) => Ok(CholFactor { inner }),
        None => Err(Error::invalid(context, "matrix is not positive definite")),
    }
}

impl CholFactor {
    pub fn solve_vec(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let rhs = DVector::from_iterator(b.len(), b.iter().copied());
        let x = self.inner.solve(&rhs);
        Array1::from_iter(x.iter().copied())
    }

    /// Solves A X = B column by column.
    pub fn solve_mat(&self, b: ArrayView2<f64>) -> Array2<f64> {
        let rhs = to_na(b);
        let x = self.inner.solve(&rhs);
        from_na(&x)
    }

    pub fn inverse(&self) -> Array2<f64> {
        from_na(&self.inner.inverse())
    }

    /// log det A, computed from the factor diagonal.
    pub fn log_det(&self) -> f64 {
        self.inner.l_dirty().diagonal().iter().take(self.inner.l_dirty().nrows())
            .map(|d| 2.0 * d.ln())
            .sum()
    }

    /// Lower-triangular factor L with L L^T = A.
    pub fn lower(&self) -> Array2<f64> {
        from_na(&self.inner.l())
    }
}

/// Eigendecomposition of a symmetric matrix; eigenvalues sorted descending,
/// eigenvectors as matching columns.
pub fn symmetric_eig(a: ArrayView2<f64>, context: &'static str) -> Result<(Array1<f64>, Array2<f64>)> {
    if a.nrows() != a.ncols() {
        return Err(Error::shape(
            context,
            format!("matrix is {}x{}, expected square", a.nrows(), a.ncols()),
        ));
    }
    let eig = nalgebra::SymmetricEigen::new(to_na(a));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .expect("eigenvalues are finite")
    });
    let values = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors =
        Array2::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Largest principal angle between the column spans of two matrices, in
/// degrees. Used to compare a learned subspace against a reference.
pub fn principal_angle_degrees(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(Error::shape(
            "principal_angle",
            format!(
                "spans are {}x{} and {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            ),
        ));
    }
    let qa = to_na(a).qr().q();
    let qb = to_na(b).qr().q();
    let m = qa.transpose() * qb;
    let svd = m.svd(false, false);
    let min_sv = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Ok(min_sv.clamp(-1.0, 1.0).acos().to_degrees())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![1.0, 2.0];
        let f = cholesky(a.view(), "test").unwrap();
        let x = f.solve_vec(b.view());
        // Solve by hand: [4 1; 1 3] x = [1; 2] => x = [1/11, 7/11].
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
        let inv = f.inverse();
        let prod = a.dot(&inv);
        assert!((prod[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((prod[[0, 1]]).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(a.view(), "test").is_err());
    }

    #[test]
    fn log_det_matches_direct() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let f = cholesky(a.view(), "test").unwrap();
        // det = 11
        assert!((f.log_det() - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_eig_sorted_descending() {
        let a = array![[2.0, 0.0], [0.0, 5.0]];
        let (vals, vecs) = symmetric_eig(a.view(), "test").unwrap();
        assert!((vals[0] - 5.0).abs() < 1e-12);
        assert!((vals[1] - 2.0).abs() < 1e-12);
        // First column is the eigenvector of eigenvalue 5 => e_2 direction.
        assert!(vecs[[1, 0]].abs() > 0.99);
    }

    #[test]
    fn principal_angle_of_equal_spans_is_zero() {
        let a = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let b = array![[2.0, 1.0], [1.0, 1.0], [0.0, 0.0]]; // same span
        let ang = principal_angle_degrees(a.view(), b.view()).unwrap();
        assert!(ang < 1e-6, "angle {ang}");
    }

    #[test]
    fn principal_angle_of_orthogonal_spans() {
        let a = array![[1.0], [0.0], [0.0]];
        let b = array![[0.0], [1.0], [0.0]];
        let ang = principal_angle_degrees(a.view(), b.view()).unwrap();
        assert!((ang - 90.0).abs() < 1e-9);
    }
}
