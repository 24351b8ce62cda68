//! Two-stage GMM for the logistic model: association coefficients by maximum
//! likelihood, then the causal moments with those coefficients held fixed.

use nalgebra::{DMatrix, DVector};

use super::gmm::{
    assemble, check_saturation, default_start, efficient_covariance, factor_weight, fit_gmm, j_from_objective,
    minimize, require_binary_outcome, sandwich, GmmFit, GmmOptions,
};
use crate::data::EstimationData;
use crate::error::{Result, SmmError};
use crate::numerics::{expit, logistic_mle, LogisticFit};
use crate::moments::MomentModel;

pub const PLUGIN_SE_NOTE: &str = "incorrect SEs: association coefficients treated as known (conservative)";

fn stage_one(data: &EstimationData) -> Result<(LogisticFit, MomentModel)> {
    require_binary_outcome(data)?;
    check_saturation(data)?;
    let assoc = logistic_mle(&data.r, &data.y)?;
    let model = MomentModel::plugin(data, assoc.coefficients.clone())?;
    Ok((assoc, model))
}

/// Second moment of the causal moments corrected for estimation of the
/// association coefficients:
/// nΩ* = Σgg′ + G′VG + G′V(ΣQRg′) + (ΣQgR′)VG, with G = Σ q(1−q)RS′,
/// V the association covariance and Q = Y − p̂.
pub fn corrected_omega(model: &MomentModel, data: &EstimationData, assoc: &LogisticFit, theta: &[f64]) -> Result<DMatrix<f64>> {
    let beta = model
        .frozen_beta()
        .ok_or_else(|| SmmError::InvalidInput("corrected covariance needs the plug-in logistic system".into()))?;
    let gm = model.moment_matrix(data, theta)?;
    let (n, m) = gm.shape();
    let qdim = data.r.ncols();
    let psi = theta[0];
    let mut big_g = DMatrix::zeros(qdim, m);
    let mut cross = DMatrix::zeros(qdim, m);
    let eta = &data.r * beta;
    for i in 0..n {
        let qv = expit(eta[i] - psi * data.x[i]);
        let dq = qv * (1.0 - qv);
        let resid = data.y[i] - assoc.fitted[i];
        for a in 0..qdim {
            let r = data.r[(i, a)];
            for c in 0..m {
                big_g[(a, c)] += dq * r * data.s[(i, c)];
                cross[(a, c)] += resid * r * gm[(i, c)];
            }
        }
    }
    let v = &assoc.covariance;
    let vg = v * &big_g;
    let vh = v * &cross;
    let total = gm.transpose() * &gm + big_g.transpose() * &vg + big_g.transpose() * &vh + cross.transpose() * &vg;
    let omega = total / n as f64;
    Ok((&omega + omega.transpose()) * 0.5)
}

/// 2SGMM estimate of the logistic model with the Ω*-corrected covariance.
/// With `steps = 2` the weight is Ω* at the one-step solution, which also
/// makes the J statistic valid.
pub fn fit_2sgmm_logistic(data: &EstimationData, steps: u8) -> Result<GmmFit> {
    if !(1..=2).contains(&steps) {
        return Err(SmmError::InvalidInput(format!("steps must be 1 or 2, got {steps}")));
    }
    let opts = GmmOptions::default();
    let (assoc, model) = stage_one(data)?;
    let start = default_start(&model, data)?;
    let w1 = model.initial_weight(data);
    let w1f = factor_weight(&w1)?;
    let first = minimize(&model, data, start.as_slice(), &w1f, &opts)?;
    let omega1 = corrected_omega(&model, data, &assoc, first.theta.as_slice())?;

    let mut fit = if steps == 1 {
        let c = model.mean_jacobian(data, first.theta.as_slice())?;
        let cov = sandwich(&c, &w1f, &omega1, data.n())?;
        assemble(&model, first.theta.clone(), cov, &first, w1, 1, None, data.n())?
    } else {
        let wf = factor_weight(&omega1)?;
        let mut second = minimize(&model, data, first.theta.as_slice(), &wf, &opts)?;
        second.converged &= first.converged;
        second.iterations += first.iterations;
        let c = model.mean_jacobian(data, second.theta.as_slice())?;
        let cov = efficient_covariance(&c, &wf, data.n())?;
        let j = j_from_objective(second.objective, data.n(), model.over_id_df());
        assemble(&model, second.theta.clone(), cov, &second, omega1, 2, j, data.n())?
    };
    fit.label = "logistic_2sgmm";
    Ok(fit)
}

/// Plug-in logistic fit with the naive covariance that ignores the first stage.
pub fn fit_logistic_plugin(data: &EstimationData, steps: u8) -> Result<GmmFit> {
    let (_, model) = stage_one(data)?;
    let start = default_start(&model, data)?;
    let mut fit = fit_gmm(&model, data, start.as_slice(), steps)?;
    fit.se_note = Some(PLUGIN_SE_NOTE);
    Ok(fit)
}

/// Association-model coefficients used by the plug-in and 2SGMM fits.
pub fn association_fit(data: &EstimationData) -> Result<DVector<f64>> {
    Ok(stage_one(data)?.0.coefficients)
}
