//! How the instruments are combined by one-step and two-step weighting.
//!
//! Near the solution the moment conditions act like `b_i′δ` regressed on the
//! instruments, so the fitted GMM estimator uses the projection of `b` onto the
//! span of S. One-step weighting projects by least squares; two-step weighting
//! reweights by the moment variance ν² and is a consistent estimate of the
//! optimal instruments when S is a set of level indicators.

use nalgebra::DMatrix;
use serde::Serialize;

use super::gmm::{factor_weight, GmmFit};
use crate::data::EstimationData;
use crate::error::{Result, SmmError};
use crate::moments::{ModelKind, MomentModel};
use crate::numerics::expit;

#[derive(Debug, Clone)]
pub struct EfficientCombination {
    /// Rows `b_i′` (n × 2): the intercept direction and the exposure direction.
    pub b: DMatrix<f64>,
    /// `(S′S)⁻¹S′B`.
    pub coefficients_one_step: DMatrix<f64>,
    /// `S(S′S)⁻¹S′B`.
    pub projection_one_step: DMatrix<f64>,
    /// `(Σ ν²SS′)⁻¹S′B`.
    pub coefficients_two_step: DMatrix<f64>,
    pub projection_two_step: DMatrix<f64>,
    /// Mean ν² within each instrument level.
    pub level_variance: Vec<LevelVariance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelVariance {
    pub level: usize,
    pub count: usize,
    pub mean_nu2: f64,
}

pub fn efficient_combination(model: &MomentModel, data: &EstimationData, fit: &GmmFit) -> Result<EfficientCombination> {
    let theta = fit.theta.as_slice();
    let n = data.n();
    let psi = fit.estimates.psi0;
    let mut b = DMatrix::from_element(n, 2, 1.0);
    let mut nu = vec![0.0; n];
    match model.kind() {
        ModelKind::Additive => {
            let alpha = theta[1];
            for i in 0..n {
                b[(i, 1)] = data.x[i];
                nu[i] = data.y[i] - psi * data.x[i] - alpha;
            }
        }
        ModelKind::MultMmom0 | ModelKind::MultMmom1 | ModelKind::MultMmomc => {
            let alpha = fit.estimates.alpha0.expect("multiplicative fits carry an intercept");
            for i in 0..n {
                let w = data.y[i] * (-psi * data.x[i]).exp();
                b[(i, 1)] = w * data.x[i];
                nu[i] = w - alpha;
            }
        }
        ModelKind::LogisticJoint | ModelKind::LogisticPlugin => {
            let alpha = fit.estimates.alpha0.expect("logistic fits carry an intercept");
            let beta = match model.frozen_beta() {
                Some(beta) => beta.clone(),
                None => fit.theta.rows(0, data.r.ncols()).into_owned(),
            };
            let eta = &data.r * beta;
            for i in 0..n {
                let q = expit(eta[i] - psi * data.x[i]);
                b[(i, 1)] = q * (1.0 - q) * data.x[i];
                nu[i] = q - alpha;
            }
        }
        k => {
            return Err(SmmError::InvalidInput(format!("instrument combination is not defined for {k}")));
        }
    }

    let s = &data.s;
    let stb = s.transpose() * &b;
    let sts = factor_weight(&(s.transpose() * s))?;
    let coefficients_one_step = sts.solve_matrix(&stb)?;
    let projection_one_step = s * &coefficients_one_step;

    let mut weighted = s.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= nu[i] * nu[i];
    }
    let svs = factor_weight(&(s.transpose() * weighted))?;
    let coefficients_two_step = svs.solve_matrix(&stb)?;
    let projection_two_step = s * &coefficients_two_step;

    let k = (data.r.ncols() - 2) / 2;
    let mut sums = vec![(0usize, 0.0); k + 1];
    for i in 0..n {
        let level = (0..k).find(|&j| data.r[(i, 2 + j)] == 1.0).map_or(0, |j| j + 1);
        sums[level].0 += 1;
        sums[level].1 += nu[i] * nu[i];
    }
    let level_variance = sums
        .iter()
        .enumerate()
        .map(|(level, &(count, total))| LevelVariance {
            level,
            count,
            mean_nu2: if count > 0 { total / count as f64 } else { f64::NAN },
        })
        .collect();

    Ok(EfficientCombination {
        b,
        coefficients_one_step,
        projection_one_step,
        coefficients_two_step,
        projection_two_step,
        level_variance,
    })
}
