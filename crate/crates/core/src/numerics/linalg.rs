//! Dense square matrices and pivoted linear solves.
//!
//! Weight and covariance matrices are never inverted explicitly on the
//! estimation path; every `W⁻¹v` goes through [`Factorized::solve`].

use std::ops::Deref;

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Result, SmmError};

/// Pivot-ratio condition estimates above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Relative tolerance for the symmetry invariant of covariance and weight matrices.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Square matrix with row-major semantic indexing (`m[(row, col)]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix(DMatrix<f64>);

impl SquareMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(SmmError::InvalidInput(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self(m))
    }

    pub fn identity(order: usize) -> Self {
        Self(DMatrix::identity(order, order))
    }

    /// Builds a symmetric matrix, averaging `m` with its transpose.
    pub fn symmetric(m: DMatrix<f64>) -> Result<Self> {
        let sym = (&m + m.transpose()) * 0.5;
        Self::new(sym)
    }

    pub fn order(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let scale = self.0.amax().max(f64::MIN_POSITIVE);
        let n = self.order();
        (0..n).all(|i| (0..i).all(|j| (self.0[(i, j)] - self.0[(j, i)]).abs() <= rel_tol * scale))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn factor(&self) -> Result<Factorized> {
        Factorized::new(&self.0)
    }
}

impl Deref for SquareMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// LU factorization with partial pivoting and a pivot-ratio condition estimate.
#[derive(Debug, Clone)]
pub struct Factorized {
    lu: LU<f64, Dyn, Dyn>,
    condition: f64,
    weakest_pivot: usize,
}

impl Factorized {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(SmmError::NonFinite { what: "matrix to factor" });
        }
        let lu = a.clone().lu();
        let u = lu.u();
        let mut max_pivot = 0.0f64;
        let mut min_pivot = f64::INFINITY;
        let mut weakest_pivot = 0;
        for j in 0..u.nrows() {
            let p = u[(j, j)].abs();
            max_pivot = max_pivot.max(p);
            if p < min_pivot {
                min_pivot = p;
                weakest_pivot = j;
            }
        }
        let condition = if min_pivot > 0.0 { max_pivot / min_pivot } else { f64::INFINITY };
        Ok(Self { lu, condition, weakest_pivot })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Column whose pivot is smallest; for weight matrices this is the moment
    /// that is (nearly) a combination of the preceding ones.
    pub fn weakest_pivot(&self) -> usize {
        self.weakest_pivot
    }

    pub fn is_well_conditioned(&self) -> bool {
        self.condition <= MAX_CONDITION
    }

    fn check(&self) -> Result<()> {
        if self.is_well_conditioned() {
            Ok(())
        } else {
            Err(SmmError::SingularMatrix { condition: self.condition })
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.check()?;
        self.lu
            .solve(b)
            .ok_or(SmmError::SingularMatrix { condition: self.condition })
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check()?;
        self.lu
            .solve(b)
            .ok_or(SmmError::SingularMatrix { condition: self.condition })
    }
}

/// Solves `A x = b` by pivoted LU.
pub fn solve_linear(a: &SquareMatrix, b: &DVector<f64>) -> Result<DVector<f64>> {
    if b.len() != a.order() {
        return Err(SmmError::InvalidInput(format!(
            "right-hand side has length {}, matrix order is {}",
            b.len(),
            a.order()
        )));
    }
    a.factor()?.solve(b)
}

/// Symmetric inverse through `solve(I)`; used only for reported covariances.
pub(crate) fn symmetric_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let inv = Factorized::new(a)?.solve_matrix(&DMatrix::identity(n, n))?;
    Ok((&inv + inv.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_and_diagonal() {
        let x = solve_linear(&SquareMatrix::identity(3), &DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0, 3.0]);
        let a = SquareMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]))).unwrap();
        let x = solve_linear(&a, &DVector::from_vec(vec![2.0, 4.0])).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn singular_reports_condition() {
        let a = SquareMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0])).unwrap();
        let err = solve_linear(&a, &DVector::from_vec(vec![1.0, 1.0])).unwrap_err();
        assert!(matches!(err, SmmError::SingularMatrix { condition } if condition > MAX_CONDITION));
    }

    #[test]
    fn duplicated_column_flags_later_index() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let f = Factorized::new(&a).unwrap();
        assert!(!f.is_well_conditioned());
        assert_eq!(f.weakest_pivot(), 2);
    }

    #[test]
    fn rejects_non_square() {
        assert!(SquareMatrix::new(DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn symmetry_check() {
        let s = SquareMatrix::symmetric(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.1, 2.0])).unwrap();
        assert!(s.is_symmetric(SYMMETRY_TOL));
        let a = SquareMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.1, 2.0])).unwrap();
        assert!(!a.is_symmetric(SYMMETRY_TOL));
    }

    fn spd_matrix(n: usize) -> impl Strategy<Value = (DMatrix<f64>, DVector<f64>)> {
        (
            proptest::collection::vec(-1.0f64..1.0, n * n),
            proptest::collection::vec(-10.0f64..10.0, n),
        )
            .prop_map(move |(g, b)| {
                let g = DMatrix::from_row_slice(n, n, &g);
                // G Gᵀ + n·I is symmetric positive definite with eigenvalues ≥ n
                let a = &g * g.transpose() + DMatrix::identity(n, n) * n as f64;
                (a, DVector::from_vec(b))
            })
    }

    proptest! {
        #[test]
        fn spd_residual_small((a, b) in spd_matrix(5)) {
            prop_assume!(b.norm() > 1e-6);
            let sq = SquareMatrix::new(a.clone()).unwrap();
            let x = solve_linear(&sq, &b).unwrap();
            let resid = (&a * &x - &b).norm() / b.norm();
            prop_assert!(resid <= 1e-8);
        }
    }
}
