use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmmError};

/// Central-difference Jacobian of `f` at `theta`, step `1e-6·max(1, |θⱼ|)` per coordinate.
pub fn finite_diff_jacobian<F>(f: F, theta: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let f0 = f(theta)?;
    if f0.iter().any(|v| !v.is_finite()) {
        return Err(SmmError::NonFinite { what: "function value" });
    }
    let mut jac = DMatrix::zeros(f0.len(), theta.len());
    let mut t = theta.clone();
    for j in 0..theta.len() {
        let h = 1e-6 * theta[j].abs().max(1.0);
        t[j] = theta[j] + h;
        let up = f(&t)?;
        t[j] = theta[j] - h;
        let down = f(&t)?;
        t[j] = theta[j];
        let col = (up - down) / (2.0 * h);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(SmmError::NonFinite { what: "finite-difference Jacobian" });
        }
        jac.set_column(j, &col);
    }
    Ok(jac)
}
