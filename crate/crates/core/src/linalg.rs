use ndarray::{Array1, Array2};
use ndarray_linalg::{Cholesky as _, Diag, SolveTriangular, UPLO};

use crate::error::{Error, Result};

/// Lower Cholesky factor `L` of a symmetric positive definite matrix
/// `A = L L'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    lower: Array2<f64>,
}

impl Cholesky {
    pub fn factor(a: &Array2<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "cannot factor a {}x{} matrix",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem(
                "matrix has non-finite entries".into(),
            ));
        }
        let lower = a
            .cholesky(UPLO::Lower)
            .map_err(|e| Error::SingularSystem(e.to_string()))?;
        if lower.diag().iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::SingularSystem("non-positive pivot".into()));
        }
        Ok(Cholesky { lower })
    }

    pub fn from_lower(lower: Array2<f64>) -> Result<Self> {
        if lower.nrows() != lower.ncols() {
            return Err(Error::DimensionMismatch("factor is not square".into()));
        }
        Ok(Cholesky { lower })
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `L x = b`.
    pub fn forward(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        self.lower
            .solve_triangular(UPLO::Lower, Diag::NonUnit, b)
            .map_err(|e| Error::SingularSystem(e.to_string()))
    }

    /// Solves `L' x = b`, column by column of `b`.
    pub fn backward(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        let upper = self.lower.t().to_owned();
        upper
            .solve_triangular(UPLO::Upper, Diag::NonUnit, b)
            .map_err(|e| Error::SingularSystem(e.to_string()))
    }

    pub fn solve_matrix(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        self.backward(&self.forward(b)?)
    }

    pub fn solve(&self, b: &Array1<f64>) -> Result<Array1<f64>> {
        let col = b.clone().insert_axis(ndarray::Axis(1));
        let x = self.solve_matrix(&col)?;
        Ok(x.column(0).to_owned())
    }

    /// `A^{-1}`
    pub fn inverse(&self) -> Result<Array2<f64>> {
        self.solve_matrix(&Array2::eye(self.dim()))
    }

    /// `tr(A^{-1} B)`
    pub fn trace_solve(&self, b: &Array2<f64>) -> Result<f64> {
        Ok(self.solve_matrix(b)?.diag().sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solve_and_inverse() {
        let a = array![[4.0, 2.0, 0.5], [2.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let c = Cholesky::factor(&a).unwrap();
        let b = array![1.0, -2.0, 0.5];
        let x = c.solve(&b).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
        let inv = c.inverse().unwrap();
        let id = a.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[[i, j]] - e).abs() < 1e-12);
            }
        }
        assert!((c.trace_solve(&a).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn singular_is_reported() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(matches!(
            Cholesky::factor(&a),
            Err(Error::SingularSystem(_))
        ));
        let b = array![[-1.0, 0.0], [0.0, 1.0]];
        assert!(Cholesky::factor(&b).is_err());
    }
}
