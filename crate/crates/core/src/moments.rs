//! Moment systems for the additive, multiplicative and logistic structural mean models.
//!
//! Every system is evaluated row by row into caller-provided buffers. Parameter
//! layouts:
//!
//! | kind | parameters |
//! |---|---|
//! | additive, mult (mmom0), logistic plug-in | `[psi0, alpha0]` |
//! | mult-log (mmom1), mult-ratio (mmomc) | `[psi0, alpha0_star]` |
//! | logistic joint | `[beta_0 .. beta_{q-1}, psi0, alpha0]` |
//! | additive / mult expanded | `[mu_1 .. mu_J, psi0]` |
//! | logistic expanded | `[beta_0 .. beta_{q-1}, mu_1 .. mu_J, psi0]` |

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::EstimationData;
use crate::error::{Result, SmmError};
use crate::numerics::expit;

/// Largest exponent magnitude accepted before `exp` is evaluated.
pub const EXP_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Additive,
    MultMmom0,
    MultMmom1,
    MultMmomc,
    LogisticJoint,
    LogisticPlugin,
    AdditiveExpanded,
    MultExpanded,
    LogisticExpanded,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::Additive,
        ModelKind::MultMmom0,
        ModelKind::MultMmom1,
        ModelKind::MultMmomc,
        ModelKind::LogisticJoint,
        ModelKind::LogisticPlugin,
        ModelKind::AdditiveExpanded,
        ModelKind::MultExpanded,
        ModelKind::LogisticExpanded,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Additive => "additive",
            ModelKind::MultMmom0 => "mult_mmom0",
            ModelKind::MultMmom1 => "mult_mmom1",
            ModelKind::MultMmomc => "mult_mmomc",
            ModelKind::LogisticJoint => "logistic_joint",
            ModelKind::LogisticPlugin => "logistic_plugin",
            ModelKind::AdditiveExpanded => "additive_expanded",
            ModelKind::MultExpanded => "mult_expanded",
            ModelKind::LogisticExpanded => "logistic_expanded",
        }
    }

    pub fn is_logistic(self) -> bool {
        matches!(self, ModelKind::LogisticJoint | ModelKind::LogisticPlugin | ModelKind::LogisticExpanded)
    }

    pub fn is_multiplicative(self) -> bool {
        matches!(self, ModelKind::MultMmom0 | ModelKind::MultMmom1 | ModelKind::MultMmomc | ModelKind::MultExpanded)
    }

    pub fn is_expanded(self) -> bool {
        matches!(self, ModelKind::AdditiveExpanded | ModelKind::MultExpanded | ModelKind::LogisticExpanded)
    }

    /// Whether `exp(psi0)` is a ratio on the natural scale (risk or odds ratio).
    pub fn exponentiates(self) -> bool {
        !matches!(self, ModelKind::Additive | ModelKind::AdditiveExpanded)
    }

    /// Whether the intercept parameter is `log alpha0` rather than `alpha0`.
    pub fn log_intercept(self) -> bool {
        matches!(self, ModelKind::MultMmom1 | ModelKind::MultMmomc)
    }

    fn has_beta(self) -> bool {
        matches!(self, ModelKind::LogisticJoint | ModelKind::LogisticExpanded)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named view of a packed parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theta {
    pub psi0: f64,
    pub alpha0: Option<f64>,
    pub alpha0_star: Option<f64>,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
}

/// A moment system bound to the dimensions of one estimation dataset.
#[derive(Debug, Clone)]
pub struct MomentModel {
    kind: ModelKind,
    /// Columns of S.
    instruments: usize,
    /// Non-constant instrument columns (expanded variants).
    centred: usize,
    /// Columns of the association regressor R.
    assoc: usize,
    frozen_beta: Option<DVector<f64>>,
}

impl MomentModel {
    pub fn new(kind: ModelKind, data: &EstimationData) -> Result<Self> {
        if kind == ModelKind::LogisticPlugin {
            return Err(SmmError::InvalidInput(
                "the plug-in logistic system needs fitted association coefficients; use MomentModel::plugin".into(),
            ));
        }
        Ok(Self::with_dims(kind, data, None))
    }

    /// Causal logistic moments with association coefficients held at `beta`.
    pub fn plugin(data: &EstimationData, beta: DVector<f64>) -> Result<Self> {
        if beta.len() != data.r.ncols() {
            return Err(SmmError::InvalidInput(format!(
                "association coefficients have length {}, regressors have {} columns",
                beta.len(),
                data.r.ncols()
            )));
        }
        Ok(Self::with_dims(ModelKind::LogisticPlugin, data, Some(beta)))
    }

    fn with_dims(kind: ModelKind, data: &EstimationData, frozen_beta: Option<DVector<f64>>) -> Self {
        Self { kind, instruments: data.s.ncols(), centred: data.zc.ncols(), assoc: data.r.ncols(), frozen_beta }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn frozen_beta(&self) -> Option<&DVector<f64>> {
        self.frozen_beta.as_ref()
    }

    fn beta_len(&self) -> usize {
        if self.kind.has_beta() {
            self.assoc
        } else {
            0
        }
    }

    fn mu_len(&self) -> usize {
        if self.kind.is_expanded() {
            self.centred
        } else {
            0
        }
    }

    pub fn param_dim(&self) -> usize {
        match self.kind {
            ModelKind::AdditiveExpanded | ModelKind::MultExpanded => self.centred + 1,
            ModelKind::LogisticExpanded => self.assoc + self.centred + 1,
            ModelKind::LogisticJoint => self.assoc + 2,
            _ => 2,
        }
    }

    pub fn moment_dim(&self) -> usize {
        match self.kind {
            ModelKind::AdditiveExpanded | ModelKind::MultExpanded => 2 * self.centred,
            ModelKind::LogisticExpanded => self.assoc + 2 * self.centred,
            ModelKind::LogisticJoint => self.assoc + self.instruments,
            _ => self.instruments,
        }
    }

    /// Number of over-identifying restrictions; negative means under-identified.
    pub fn over_id_df(&self) -> isize {
        self.moment_dim() as isize - self.param_dim() as isize
    }

    pub fn psi_index(&self) -> usize {
        match self.kind {
            ModelKind::LogisticJoint => self.assoc,
            ModelKind::AdditiveExpanded | ModelKind::MultExpanded | ModelKind::LogisticExpanded => {
                self.beta_len() + self.centred
            }
            _ => 0,
        }
    }

    pub fn alpha_index(&self) -> Option<usize> {
        match self.kind {
            ModelKind::LogisticJoint => Some(self.assoc + 1),
            k if k.is_expanded() => None,
            _ => Some(1),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.beta_len()).map(|j| format!("beta{j}")).collect();
        names.extend((1..=self.mu_len()).map(|j| format!("mu{j}")));
        names.push("psi0".into());
        if self.alpha_index().is_some() {
            names.push(if self.kind.log_intercept() { "alpha0_star" } else { "alpha0" }.into());
        }
        names
    }

    pub fn unpack(&self, theta: &[f64]) -> Theta {
        let b = self.beta_len();
        let beta = theta[..b].to_vec();
        let mu = theta[b..b + self.mu_len()].to_vec();
        let psi0 = theta[self.psi_index()];
        let (alpha0, alpha0_star) = match self.alpha_index() {
            Some(a) if self.kind.log_intercept() => (Some(theta[a].exp()), Some(theta[a])),
            Some(a) => (Some(theta[a]), (theta[a] > 0.0).then(|| theta[a].ln())),
            None => (None, None),
        };
        Theta { psi0, alpha0, alpha0_star, beta, mu }
    }

    /// Initial weight: S'S/n, blockdiag(R'R/n, S'S/n) for the joint logistic
    /// system, identity for expanded systems.
    pub fn initial_weight(&self, data: &EstimationData) -> DMatrix<f64> {
        let n = data.n() as f64;
        let sts = data.s.transpose() * &data.s / n;
        match self.kind {
            k if k.is_expanded() => DMatrix::identity(self.moment_dim(), self.moment_dim()),
            ModelKind::LogisticJoint => {
                let q = self.assoc;
                let mut w = DMatrix::zeros(self.moment_dim(), self.moment_dim());
                w.view_mut((0, 0), (q, q)).copy_from(&(data.r.transpose() * &data.r / n));
                w.view_mut((q, q), (self.instruments, self.instruments)).copy_from(&sts);
                w
            }
            _ => sts,
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(SmmError::InvalidInput(format!(
                "{} expects {} parameters, got {}",
                self.kind,
                self.param_dim(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(SmmError::NonFinite { what: "parameter vector" });
        }
        Ok(())
    }

    /// Evaluates g_i(θ) into `g` and, when requested, ∂g_i/∂θ′ into `jac`
    /// (row-major, `moment_dim × param_dim`, fully overwritten).
    pub fn eval_row(
        &self,
        data: &EstimationData,
        i: usize,
        theta: &[f64],
        g: &mut [f64],
        mut jac: Option<&mut [f64]>,
    ) -> Result<()> {
        let k = self.param_dim();
        let y = data.y[i];
        let x = data.x[i];
        if let Some(j) = jac.as_deref_mut() {
            j.fill(0.0);
        }
        let p = self.instruments;
        let s = |c: usize| data.s[(i, c)];
        match self.kind {
            ModelKind::Additive | ModelKind::MultMmom0 | ModelKind::MultMmom1 | ModelKind::MultMmomc => {
                let psi = theta[0];
                let a = theta[1];
                // residual e and its partial derivatives in (psi, a)
                let (e, de_psi, de_a) = match self.kind {
                    ModelKind::Additive => (y - psi * x - a, -x, -1.0),
                    ModelKind::MultMmom0 => {
                        let w = y * guarded_exp(-psi * x)?;
                        (w - a, -x * w, -1.0)
                    }
                    ModelKind::MultMmom1 => {
                        let w = y * guarded_exp(-psi * x)?;
                        let ea = guarded_exp(a)?;
                        (w - ea, -x * w, -ea)
                    }
                    _ => {
                        let w = y * guarded_exp(-a - psi * x)?;
                        (w - 1.0, -x * w, -w)
                    }
                };
                for c in 0..p {
                    g[c] = e * s(c);
                }
                if let Some(j) = jac {
                    for c in 0..p {
                        j[c * k] = de_psi * s(c);
                        j[c * k + 1] = de_a * s(c);
                    }
                }
            }
            ModelKind::LogisticJoint | ModelKind::LogisticPlugin => {
                let q = self.assoc;
                let (beta, psi, alpha, off) = match &self.frozen_beta {
                    Some(b) => (b.as_slice(), theta[0], theta[1], 0),
                    None => (&theta[..q], theta[q], theta[q + 1], q),
                };
                let eta = linear_predictor(data, i, beta);
                let qv = expit(eta - psi * x);
                let c_res = qv - alpha;
                let dq = qv * (1.0 - qv);
                if off > 0 {
                    let pv = expit(eta);
                    for r in 0..q {
                        g[r] = (y - pv) * data.r[(i, r)];
                    }
                    if let Some(j) = jac.as_deref_mut() {
                        let w = -pv * (1.0 - pv);
                        for r in 0..q {
                            for c in 0..q {
                                j[r * k + c] = w * data.r[(i, r)] * data.r[(i, c)];
                            }
                        }
                    }
                }
                for c in 0..p {
                    g[off + c] = c_res * s(c);
                }
                if let Some(j) = jac {
                    let psi_col = off;
                    let alpha_col = off + 1;
                    for c in 0..p {
                        let row = (off + c) * k;
                        if off > 0 {
                            for b in 0..q {
                                j[row + b] = dq * data.r[(i, b)] * s(c);
                            }
                        }
                        j[row + psi_col] = -dq * x * s(c);
                        j[row + alpha_col] = -s(c);
                    }
                }
            }
            ModelKind::AdditiveExpanded | ModelKind::MultExpanded | ModelKind::LogisticExpanded => {
                let b = self.beta_len();
                let nj = self.centred;
                let psi = theta[b + nj];
                let mu = &theta[b..b + nj];
                // exposure-free transform h* and its derivative in psi;
                // the logistic variant also needs p(1-p) pieces for beta
                let (h, dh_psi, dq) = match self.kind {
                    ModelKind::AdditiveExpanded => (y - psi * x, -x, 0.0),
                    ModelKind::MultExpanded => {
                        let w = y * guarded_exp(-psi * x)?;
                        (w, -x * w, 0.0)
                    }
                    _ => {
                        let eta = linear_predictor(data, i, &theta[..b]);
                        let pv = expit(eta);
                        for r in 0..b {
                            g[r] = (y - pv) * data.r[(i, r)];
                        }
                        if let Some(j) = jac.as_deref_mut() {
                            let w = -pv * (1.0 - pv);
                            for r in 0..b {
                                for c in 0..b {
                                    j[r * k + c] = w * data.r[(i, r)] * data.r[(i, c)];
                                }
                            }
                        }
                        let qv = expit(eta - psi * x);
                        let dq = qv * (1.0 - qv);
                        (qv, -dq * x, dq)
                    }
                };
                for jj in 0..nj {
                    let d = data.zc[(i, jj)] - mu[jj];
                    g[b + jj] = d;
                    g[b + nj + jj] = d * h;
                }
                if let Some(j) = jac {
                    for jj in 0..nj {
                        let d = data.zc[(i, jj)] - mu[jj];
                        j[(b + jj) * k + b + jj] = -1.0;
                        let row = (b + nj + jj) * k;
                        j[row + b + jj] = -h;
                        j[row + b + nj] = d * dh_psi;
                        for c in 0..b {
                            j[row + c] = d * dq * data.r[(i, c)];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-row moments as an `n × moment_dim` matrix.
    pub fn moment_matrix(&self, data: &EstimationData, theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        let m = self.moment_dim();
        let n = data.n();
        let mut out = DMatrix::zeros(n, m);
        let mut g = vec![0.0; m];
        for i in 0..n {
            self.eval_row(data, i, theta, &mut g, None)?;
            for (c, v) in g.iter().enumerate() {
                out[(i, c)] = *v;
            }
        }
        Ok(out)
    }

    /// Sample mean ḡ(θ).
    pub fn mean_moments(&self, data: &EstimationData, theta: &[f64]) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        let m = self.moment_dim();
        let mut g = vec![0.0; m];
        let mut acc = DVector::zeros(m);
        for i in 0..data.n() {
            self.eval_row(data, i, theta, &mut g, None)?;
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        let mean = acc / data.n() as f64;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(SmmError::NonFinite { what: "sample moments" });
        }
        Ok(mean)
    }

    /// Sample mean ḡ(θ) together with Ĉ = n⁻¹Σ∂g_i/∂θ′.
    pub fn mean_moments_and_jacobian(
        &self,
        data: &EstimationData,
        theta: &[f64],
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_theta(theta)?;
        let (m, k) = (self.moment_dim(), self.param_dim());
        let mut g = vec![0.0; m];
        let mut jrow = vec![0.0; m * k];
        let mut gsum = vec![0.0; m];
        let mut jsum = vec![0.0; m * k];
        for i in 0..data.n() {
            self.eval_row(data, i, theta, &mut g, Some(&mut jrow))?;
            for (a, v) in gsum.iter_mut().zip(&g) {
                *a += v;
            }
            for (a, v) in jsum.iter_mut().zip(&jrow) {
                *a += v;
            }
        }
        let n = data.n() as f64;
        let gbar = DVector::from_iterator(m, gsum.into_iter().map(|v| v / n));
        let cbar = DMatrix::from_row_iterator(m, k, jsum.into_iter().map(|v| v / n));
        if gbar.iter().chain(cbar.iter()).any(|v| !v.is_finite()) {
            return Err(SmmError::NonFinite { what: "sample moments" });
        }
        Ok((gbar, cbar))
    }

    pub fn mean_jacobian(&self, data: &EstimationData, theta: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.mean_moments_and_jacobian(data, theta)?.1)
    }

    /// Uncentred second moment Ω̂ = n⁻¹Σ g_i g_i′.
    pub fn outer_product(&self, data: &EstimationData, theta: &[f64]) -> Result<DMatrix<f64>> {
        let gm = self.moment_matrix(data, theta)?;
        Ok(gm.transpose() * &gm / data.n() as f64)
    }
}

fn linear_predictor(data: &EstimationData, i: usize, beta: &[f64]) -> f64 {
    beta.iter().enumerate().map(|(c, b)| b * data.r[(i, c)]).sum()
}

fn guarded_exp(t: f64) -> Result<f64> {
    if t.abs() > EXP_LIMIT {
        return Err(SmmError::Overflow { value: t.abs() });
    }
    Ok(t.exp())
}
