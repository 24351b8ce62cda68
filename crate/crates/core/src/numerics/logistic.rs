//! Logistic regression by Newton–Raphson.

use nalgebra::{DMatrix, DVector};

use super::dist::expit;
use super::linalg::{symmetric_inverse, Factorized};
use crate::error::{Result, SmmError};

const MAX_ITER: usize = 100;
const SCORE_TOL: f64 = 1e-8;
const STEP_TOL: f64 = 1e-12;
const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coefficients: DVector<f64>,
    /// `(Σ p̂(1−p̂) R Rᵀ)⁻¹`
    pub covariance: DMatrix<f64>,
    pub fitted: DVector<f64>,
    pub iterations: usize,
}

fn log_likelihood(design: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = design * beta;
    eta.iter()
        .zip(y.iter())
        .map(|(&e, &yi)| {
            // log(1 + e^e) computed without overflow
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            yi * e - softplus
        })
        .sum()
}

fn score_and_information(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let p = (design * beta).map(expit);
    let resid = y - &p;
    let score = design.transpose() * &resid;
    let mut weighted = design.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= p[i] * (1.0 - p[i]);
    }
    let info = design.transpose() * weighted;
    (score, info, p)
}

/// Maximum-likelihood logistic regression of `response` on the columns of `design`.
pub fn logistic_mle(design: &DMatrix<f64>, response: &DVector<f64>) -> Result<LogisticFit> {
    let (n, q) = design.shape();
    if response.len() != n {
        return Err(SmmError::InvalidInput(format!(
            "response has length {}, design has {n} rows",
            response.len()
        )));
    }
    if response.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(SmmError::InvalidInput("logistic response must be 0/1".into()));
    }
    if n < q || design.iter().any(|v| !v.is_finite()) {
        return Err(SmmError::RankDeficient);
    }
    let gram = design.transpose() * design;
    if !Factorized::new(&gram)?.is_well_conditioned() {
        return Err(SmmError::RankDeficient);
    }

    let mut beta = DVector::zeros(q);
    let mut ll = log_likelihood(design, response, &beta);
    for iter in 1..=MAX_ITER {
        let (score, info, _) = score_and_information(design, response, &beta);
        let step = Factorized::new(&info)?.solve(&score).map_err(|_| separation(&beta))?;
        if score.amax() <= SCORE_TOL {
            // one more full Newton step lands at rounding level in the quadratic region
            return finish(design, response, beta + step, iter);
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &beta + &step * t;
            let trial_ll = log_likelihood(design, response, &trial);
            if trial_ll.is_finite() && trial_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = trial;
                ll = trial_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if let Some((j, &b)) = beta.iter().enumerate().find(|(_, b)| b.abs() > SEPARATION_BOUND) {
            return Err(SmmError::Separation { index: j, value: b });
        }
        if !accepted || (step.amax() * t) < STEP_TOL {
            let (score, _, _) = score_and_information(design, response, &beta);
            if score.amax() <= SCORE_TOL * (n as f64).max(1.0) {
                return finish(design, response, beta, iter);
            }
            return Err(separation(&beta));
        }
    }
    Err(SmmError::NotConverged { iterations: MAX_ITER })
}

fn separation(beta: &DVector<f64>) -> SmmError {
    let (index, value) = beta
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .unwrap_or((0, f64::NAN));
    SmmError::Separation { index, value }
}

fn finish(design: &DMatrix<f64>, y: &DVector<f64>, beta: DVector<f64>, iterations: usize) -> Result<LogisticFit> {
    let (_, info, fitted) = score_and_information(design, y, &beta);
    let covariance = symmetric_inverse(&info)?;
    Ok(LogisticFit { coefficients: beta, covariance, fitted, iterations })
}
