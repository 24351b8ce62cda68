//! Weighted moment minimisation, one- and two-step fits and the J test.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::EstimationData;
use crate::error::{Result, SmmError};
use crate::moments::{MomentModel, Theta};
use crate::numerics::linalg::{symmetric_inverse, Factorized, SquareMatrix};
use crate::numerics::{chisq_survival, logistic_mle};

/// Two-sided 97.5% standard normal quantile used for reported intervals.
pub const Z_975: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmOptions {
    pub max_iter: usize,
    pub step_tol: f64,
    pub grad_tol: f64,
    pub max_halvings: usize,
    pub fallback_iters: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self { max_iter: 200, step_tol: 1e-10, grad_tol: 1e-8, max_halvings: 30, fallback_iters: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: crate::moments::ModelKind,
    /// Estimator name used in reports.
    pub label: &'static str,
    pub param_names: Vec<String>,
    pub theta: DVector<f64>,
    pub estimates: Theta,
    pub covariance: SquareMatrix,
    pub standard_errors: Vec<f64>,
    pub conf_intervals_95: Vec<(f64, f64)>,
    pub j_test: Option<JTest>,
    pub j_df: usize,
    pub steps: u8,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub weight: SquareMatrix,
    pub n: usize,
    /// Caveat attached to the reported standard errors, if any.
    pub se_note: Option<&'static str>,
}

impl GmmFit {
    pub fn psi0(&self) -> f64 {
        self.estimates.psi0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|p| p == name)
    }

    pub fn se_of(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|j| self.standard_errors[j])
    }

    pub fn psi0_se(&self) -> f64 {
        self.se_of("psi0").unwrap_or(f64::NAN)
    }
}

/// ḡ(θ)′W⁻¹ḡ(θ).
pub fn gmm_objective(model: &MomentModel, data: &EstimationData, theta: &[f64], weight: &SquareMatrix) -> Result<f64> {
    let w = factor_weight(weight.as_matrix())?;
    objective_with(model, data, theta, &w)
}

fn objective_with(model: &MomentModel, data: &EstimationData, theta: &[f64], w: &Factorized) -> Result<f64> {
    let g = model.mean_moments(data, theta)?;
    Ok(g.dot(&w.solve(&g)?).max(0.0))
}

pub(crate) fn factor_weight(w: &DMatrix<f64>) -> Result<Factorized> {
    let f = Factorized::new(w)?;
    if !f.is_well_conditioned() {
        return Err(SmmError::SingularWeight { index: f.weakest_pivot(), condition: f.condition() });
    }
    Ok(f)
}

/// Outcome of minimising the objective for a fixed weight.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub theta: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Gauss–Newton on the moment system with backtracking, falling back to a
/// short Nelder–Mead run whenever no descent step is found.
pub fn minimize(
    model: &MomentModel,
    data: &EstimationData,
    start: &[f64],
    weight: &Factorized,
    opts: &GmmOptions,
) -> Result<Minimum> {
    let mut theta = DVector::from_column_slice(start);
    let (mut g, mut c) = model.mean_moments_and_jacobian(data, theta.as_slice())?;
    let mut obj = g.dot(&weight.solve(&g)?);
    let mut fallbacks_without_progress = 0;

    for iter in 1..=opts.max_iter {
        let wg = weight.solve(&g)?;
        let wc = weight.solve_matrix(&c)?;
        let grad = 2.0 * c.transpose() * &wg;
        let normal = c.transpose() * &wc;
        let normal_f = Factorized::new(&normal)?;
        let step = if normal_f.is_well_conditioned() {
            Some(-normal_f.solve(&(c.transpose() * &wg))?)
        } else if iter == 1 {
            return Err(SmmError::DegenerateInstrument(
                "moment Jacobian is rank deficient at the starting value; the instruments do not move the exposure"
                    .into(),
            ));
        } else {
            None
        };

        if let Some(step) = &step {
            if step.amax() <= opts.step_tol && grad.amax() <= opts.grad_tol {
                return polish(model, data, theta, obj, weight, iter);
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=opts.max_halvings {
                let trial = &theta + step * t;
                if let Ok(tg) = model.mean_moments(data, trial.as_slice()) {
                    let tobj = tg.dot(&weight.solve(&tg)?);
                    if tobj.is_finite() && tobj < obj {
                        accepted = Some((trial, tobj));
                        break;
                    }
                }
                t *= 0.5;
            }
            if let Some((trial, tobj)) = accepted {
                theta = trial;
                obj = tobj;
                let (ng, nc) = model.mean_moments_and_jacobian(data, theta.as_slice())?;
                g = ng;
                c = nc;
                fallbacks_without_progress = 0;
                continue;
            }
        }
        // No descent along the Gauss–Newton direction. With a well-conditioned
        // system and a vanishing gradient this is round-off at the optimum; a
        // singular system means the parameters drifted where the moments stop
        // depending on them.
        if step.is_some() && grad.amax() <= opts.grad_tol {
            return polish(model, data, theta, obj, weight, iter);
        }
        let f = |t: &DVector<f64>| objective_with(model, data, t.as_slice(), weight).unwrap_or(f64::INFINITY);
        let (nt, nobj) = nelder_mead(&f, &theta, opts.fallback_iters);
        if nobj < obj {
            theta = nt;
            obj = nobj;
            let (ng, nc) = model.mean_moments_and_jacobian(data, theta.as_slice())?;
            g = ng;
            c = nc;
            fallbacks_without_progress = 0;
        } else {
            fallbacks_without_progress += 1;
            if fallbacks_without_progress >= 2 {
                return Ok(Minimum { theta, objective: obj.max(0.0), iterations: iter, converged: false });
            }
        }
    }
    Ok(Minimum { theta, objective: obj.max(0.0), iterations: opts.max_iter, converged: false })
}

/// Finishes with undamped Gauss–Newton updates while they stay negligible.
/// Near the optimum the objective cannot resolve such steps, but the normal
/// equations still can.
fn polish(
    model: &MomentModel,
    data: &EstimationData,
    mut theta: DVector<f64>,
    obj: f64,
    weight: &Factorized,
    iterations: usize,
) -> Result<Minimum> {
    let start = (theta.clone(), obj);
    for _ in 0..3 {
        let Ok((g, c)) = model.mean_moments_and_jacobian(data, theta.as_slice()) else { break };
        let wc = weight.solve_matrix(&c)?;
        let normal = Factorized::new(&(c.transpose() * &wc))?;
        if !normal.is_well_conditioned() {
            break;
        }
        let step = -normal.solve(&(wc.transpose() * &g))?;
        let scale = theta.amax().max(1.0);
        if !step.iter().all(|v| v.is_finite()) || step.amax() > 1e-6 * scale {
            break;
        }
        theta += &step;
        if step.amax() <= 1e-15 * scale {
            break;
        }
    }
    let objective = match objective_with(model, data, theta.as_slice(), weight) {
        // accept the polished point unless it is visibly worse
        Ok(v) if v.is_finite() && v <= start.1 * (1.0 + 1e-9) + 1e-30 => v,
        _ => {
            theta = start.0;
            start.1
        }
    };
    let c = model.mean_jacobian(data, theta.as_slice())?;
    Ok(Minimum { converged: !has_vanishing_column(&c), theta, objective: objective.max(0.0), iterations })
}

/// A parameter whose Jacobian column has vanished relative to the others has
/// drifted to where the moments no longer depend on it (for example ψ → ∞ when
/// the multiplicative system has no finite root).
fn has_vanishing_column(c: &DMatrix<f64>) -> bool {
    let scale = c.amax();
    scale == 0.0 || c.column_iter().any(|col| col.amax() <= 1e-12 * scale)
}

fn nelder_mead<F: Fn(&DVector<f64>) -> f64>(f: &F, x0: &DVector<f64>, iters: usize) -> (DVector<f64>, f64) {
    let k = x0.len();
    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(k + 1);
    simplex.push((x0.clone(), f(x0)));
    for j in 0..k {
        let mut v = x0.clone();
        v[j] += 0.05 * x0[j].abs().max(0.1);
        let fv = f(&v);
        simplex.push((v, fv));
    }
    for _ in 0..iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let centroid = simplex[..k].iter().fold(DVector::zeros(k), |acc, (v, _)| acc + v) / k as f64;
        let worst = simplex[k].clone();
        let reflect = &centroid + (&centroid - &worst.0);
        let fr = f(&reflect);
        if fr < simplex[0].1 {
            let expand = &centroid + (&reflect - &centroid) * 2.0;
            let fe = f(&expand);
            simplex[k] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[k - 1].1 {
            simplex[k] = (reflect, fr);
        } else {
            let contract = &centroid + (&worst.0 - &centroid) * 0.5;
            let fc = f(&contract);
            if fc < worst.1 {
                simplex[k] = (contract, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let v = &best + (&entry.0 - &best) * 0.5;
                    let fv = f(&v);
                    *entry = (v, fv);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

pub(crate) fn ci_from(theta: &DVector<f64>, se: &[f64]) -> Vec<(f64, f64)> {
    theta.iter().zip(se).map(|(&t, &s)| (t - Z_975 * s, t + Z_975 * s)).collect()
}

pub(crate) fn standard_errors(cov: &DMatrix<f64>) -> Vec<f64> {
    cov.diagonal().iter().map(|&v| v.max(0.0).sqrt()).collect()
}

/// Sandwich covariance (C′W⁻¹C)⁻¹C′W⁻¹ΩW⁻¹C(C′W⁻¹C)⁻¹ / n.
pub(crate) fn sandwich(c: &DMatrix<f64>, w: &Factorized, omega: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let wc = w.solve_matrix(c)?;
    let bread = symmetric_inverse(&(c.transpose() * &wc))?;
    let meat = wc.transpose() * omega * &wc;
    let v = &bread * meat * &bread / n as f64;
    Ok((&v + v.transpose()) * 0.5)
}

/// (C′Ω⁻¹C)⁻¹ / n.
pub(crate) fn efficient_covariance(c: &DMatrix<f64>, omega: &Factorized, n: usize) -> Result<DMatrix<f64>> {
    let oc = omega.solve_matrix(c)?;
    Ok(symmetric_inverse(&(c.transpose() * oc))? / n as f64)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn assemble(
    model: &MomentModel,
    theta: DVector<f64>,
    covariance: DMatrix<f64>,
    min: &Minimum,
    weight: DMatrix<f64>,
    steps: u8,
    j_test: Option<JTest>,
    n: usize,
) -> Result<GmmFit> {
    let standard_errors = standard_errors(&covariance);
    let conf_intervals_95 = ci_from(&theta, &standard_errors);
    Ok(GmmFit {
        model: model.kind(),
        label: model.kind().name(),
        param_names: model.param_names(),
        estimates: model.unpack(theta.as_slice()),
        theta,
        covariance: SquareMatrix::symmetric(covariance)?,
        standard_errors,
        conf_intervals_95,
        j_test,
        j_df: model.over_id_df().max(0) as usize,
        steps,
        converged: min.converged,
        iterations: min.iterations,
        objective: min.objective,
        weight: SquareMatrix::symmetric(weight)?,
        n,
        se_note: None,
    })
}

fn check_identified(model: &MomentModel) -> Result<()> {
    if model.over_id_df() < 0 {
        return Err(SmmError::InvalidInput(format!(
            "{} has {} moments for {} parameters",
            model.kind(),
            model.moment_dim(),
            model.param_dim()
        )));
    }
    Ok(())
}

/// One-step fit with the model's initial weight.
pub fn fit_one_step(model: &MomentModel, data: &EstimationData, start: &[f64]) -> Result<GmmFit> {
    fit_one_step_with(model, data, start, &GmmOptions::default())
}

pub fn fit_one_step_with(model: &MomentModel, data: &EstimationData, start: &[f64], opts: &GmmOptions) -> Result<GmmFit> {
    check_identified(model)?;
    let w = model.initial_weight(data);
    let wf = factor_weight(&w)?;
    let min = minimize(model, data, start, &wf, opts)?;
    let (_, c) = model.mean_moments_and_jacobian(data, min.theta.as_slice())?;
    let omega = model.outer_product(data, min.theta.as_slice())?;
    let cov = sandwich(&c, &wf, &omega, data.n())?;
    assemble(model, min.theta.clone(), cov, &min, w, 1, None, data.n())
}

/// Two-step fit: weight Ω̂ at the one-step solution, covariance (Ĉ′Ω̂⁻¹Ĉ)⁻¹/n with
/// Ĉ at the two-step solution, and the J test for over-identified systems.
pub fn fit_two_step(model: &MomentModel, data: &EstimationData, start: &[f64]) -> Result<GmmFit> {
    fit_two_step_with(model, data, start, &GmmOptions::default())
}

pub fn fit_two_step_with(model: &MomentModel, data: &EstimationData, start: &[f64], opts: &GmmOptions) -> Result<GmmFit> {
    let first = fit_one_step_with(model, data, start, opts)?;
    let omega = model.outer_product(data, first.theta.as_slice())?;
    let omega = (&omega + omega.transpose()) * 0.5;
    let wf = factor_weight(&omega)?;
    let mut min = minimize(model, data, first.theta.as_slice(), &wf, opts)?;
    min.converged &= first.converged;
    min.iterations += first.iterations;
    let (_, c) = model.mean_moments_and_jacobian(data, min.theta.as_slice())?;
    let cov = efficient_covariance(&c, &wf, data.n())?;
    let j_test = j_from_objective(min.objective, data.n(), model.over_id_df());
    assemble(model, min.theta.clone(), cov, &min, omega, 2, j_test, data.n())
}

pub fn fit_gmm(model: &MomentModel, data: &EstimationData, start: &[f64], steps: u8) -> Result<GmmFit> {
    match steps {
        1 => fit_one_step(model, data, start),
        2 => fit_two_step(model, data, start),
        s => Err(SmmError::InvalidInput(format!("steps must be 1 or 2, got {s}"))),
    }
}

pub(crate) fn j_from_objective(objective: f64, n: usize, df: isize) -> Option<JTest> {
    (df > 0).then(|| {
        let statistic = n as f64 * objective;
        JTest { statistic, df: df as usize, p_value: chisq_survival(statistic, df as usize) }
    })
}

/// n·ḡ(θ̂)′W⁻¹ḡ(θ̂) under the fit's weight, referred to χ² with the
/// over-identification degrees of freedom.
pub fn hansen_j(fit: &GmmFit, model: &MomentModel, data: &EstimationData) -> Result<JTest> {
    if model.over_id_df() <= 0 {
        return Err(SmmError::NotOverIdentified);
    }
    let obj = gmm_objective(model, data, fit.theta.as_slice(), &fit.weight)?;
    Ok(j_from_objective(obj, data.n(), model.over_id_df()).expect("positive df"))
}

/// Fails with `DegenerateInstrument` when the instruments explain none of the
/// exposure's variation.
pub fn check_exposure_relevance(data: &EstimationData) -> Result<()> {
    let sts = data.s.transpose() * &data.s;
    let f = factor_weight(&sts)?;
    let coef = f.solve(&(data.s.transpose() * &data.x))?;
    let fitted = &data.s * coef;
    let (lo, hi) = fitted.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let scale = data.x.amax().max(1.0);
    if hi - lo <= 1e-12 * scale {
        return Err(SmmError::DegenerateInstrument("exposure mean does not vary with the instrument".into()));
    }
    Ok(())
}

/// All (exposure, instrument level) cells must be populated for the saturated
/// association model when the exposure is binary.
pub fn check_saturation(data: &EstimationData) -> Result<()> {
    if !data.x.iter().all(|&v| v == 0.0 || v == 1.0) {
        return Ok(());
    }
    let k = (data.r.ncols() - 2) / 2;
    let mut counts = vec![[0usize; 2]; k + 1];
    for i in 0..data.n() {
        let level = (0..k).find(|&j| data.r[(i, 2 + j)] == 1.0).map_or(0, |j| j + 1);
        counts[level][data.x[i] as usize] += 1;
    }
    for (level, c) in counts.iter().enumerate() {
        for x in 0..2 {
            if c[x] == 0 {
                return Err(SmmError::SaturationFailure { x: x as u8, level });
            }
        }
    }
    Ok(())
}

pub(crate) fn require_binary_outcome(data: &EstimationData) -> Result<()> {
    if data.y.iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(SmmError::InvalidInput("logistic models need a binary (0/1) outcome".into()))
    }
}

/// Starting values: two-stage least squares for the additive model, ψ=0 with
/// the outcome mean for multiplicative models, and the association MLE with
/// ψ=0 and the mean fitted probability for logistic models.
pub fn default_start(model: &MomentModel, data: &EstimationData) -> Result<DVector<f64>> {
    use crate::moments::ModelKind::*;
    let ybar = data.y.mean();
    let mu: Vec<f64> = data.zc.column_iter().map(|c| c.mean()).collect();
    let log_ybar = || {
        if ybar > 0.0 {
            Ok(ybar.ln())
        } else {
            Err(SmmError::Domain { what: "outcome mean (log intercept needs a positive mean)", value: ybar })
        }
    };
    let v = match model.kind() {
        Additive => {
            let (psi, alpha) = super::tsls::tsls_coefficients(data)?;
            vec![psi, alpha]
        }
        MultMmom0 => vec![0.0, ybar],
        MultMmom1 | MultMmomc => vec![0.0, log_ybar()?],
        AdditiveExpanded => {
            let (psi, _) = super::tsls::tsls_coefficients(data)?;
            mu.into_iter().chain([psi]).collect()
        }
        MultExpanded => mu.into_iter().chain([0.0]).collect(),
        LogisticPlugin => {
            let beta = model.frozen_beta().expect("plug-in model carries coefficients");
            let pbar = (&data.r * beta).map(crate::numerics::expit).mean();
            vec![0.0, pbar]
        }
        LogisticJoint | LogisticExpanded => {
            require_binary_outcome(data)?;
            check_saturation(data)?;
            let fit = logistic_mle(&data.r, &data.y)?;
            let mut v: Vec<f64> = fit.coefficients.iter().copied().collect();
            if model.kind() == LogisticJoint {
                v.extend([0.0, fit.fitted.mean()]);
            } else {
                v.extend(mu);
                v.push(0.0);
            }
            v
        }
    };
    Ok(DVector::from_vec(v))
}

/// Builds the named model on `data` and fits it from the default start.
pub fn fit_model(kind: crate::moments::ModelKind, data: &EstimationData, steps: u8) -> Result<GmmFit> {
    use crate::moments::ModelKind::*;
    match kind {
        LogisticPlugin => return super::two_stage::fit_logistic_plugin(data, steps),
        k if k.is_logistic() => require_binary_outcome(data)?,
        _ => check_exposure_relevance(data)?,
    }
    let model = MomentModel::new(kind, data)?;
    let start = default_start(&model, data)?;
    fit_gmm(&model, data, start.as_slice(), steps)
}
