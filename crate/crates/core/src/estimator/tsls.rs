//! Closed-form two-stage least squares for the additive model.

use nalgebra::{DMatrix, DVector};

use super::gmm::{assemble, factor_weight, sandwich, GmmFit, Minimum};
use crate::data::EstimationData;
use crate::error::{Result, SmmError};
use crate::moments::{ModelKind, MomentModel};
use crate::numerics::linalg::Factorized;

/// 2SLS coefficients of `y` on `(x, 1)` with instruments `S`; returns `(psi, alpha)`.
pub(crate) fn tsls_coefficients(data: &EstimationData) -> Result<(f64, f64)> {
    let regressors = DMatrix::from_fn(data.n(), 2, |i, j| if j == 0 { data.x[i] } else { 1.0 });
    let b = tsls_general(&data.s, &regressors, &data.y)?;
    Ok((b[0], b[1]))
}

/// β = (X′P X)⁻¹X′P y with P the projection onto the columns of `instruments`.
pub fn tsls_general(instruments: &DMatrix<f64>, regressors: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let sts = factor_weight(&(instruments.transpose() * instruments))?;
    let sx = instruments.transpose() * regressors;
    let sy = instruments.transpose() * y;
    let proj_x = sts.solve_matrix(&sx)?;
    let normal = sx.transpose() * &proj_x;
    let nf = Factorized::new(&normal)?;
    if !nf.is_well_conditioned() {
        return Err(SmmError::DegenerateInstrument(
            "first stage is rank deficient; the instruments do not predict the exposure".into(),
        ));
    }
    nf.solve(&(proj_x.transpose() * sy))
}

/// Two-stage least squares fit of the additive model, reported with the same
/// heteroskedasticity-robust covariance as the one-step GMM fit.
pub fn fit_2sls_additive(data: &EstimationData) -> Result<GmmFit> {
    let (psi, alpha) = tsls_coefficients(data)?;
    let model = MomentModel::new(ModelKind::Additive, data)?;
    let theta = DVector::from_vec(vec![psi, alpha]);
    let w = model.initial_weight(data);
    let wf = factor_weight(&w)?;
    let (g, c) = model.mean_moments_and_jacobian(data, theta.as_slice())?;
    let omega = model.outer_product(data, theta.as_slice())?;
    let cov = sandwich(&c, &wf, &omega, data.n())?;
    let min = Minimum { objective: g.dot(&wf.solve(&g)?).max(0.0), theta: theta.clone(), iterations: 0, converged: true };
    assemble(&model, theta, cov, &min, w, 1, None, data.n())
}
