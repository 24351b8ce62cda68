//! Serializable fit reports.

use serde::{Deserialize, Serialize};

use crate::data::{Columns, EstimationData, MergeReport};
use crate::estimator::{GmmFit, Z_975};
use crate::moments::ModelKind;
use crate::numerics::expit;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpScale {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Natural-scale view: exp of the estimate and of each interval endpoint.
    pub exp: Option<ExpScale>,
}

impl EstimateRow {
    fn new(name: &str, estimate: f64, se: f64, exponentiate: bool) -> Self {
        let (ci_low, ci_high) = (estimate - Z_975 * se, estimate + Z_975 * se);
        let exp = exponentiate.then(|| ExpScale { estimate: estimate.exp(), ci_low: ci_low.exp(), ci_high: ci_high.exp() });
        Self { name: name.to_string(), estimate, se, ci_low, ci_high, exp }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub file: Option<String>,
    pub outcome: String,
    pub exposure: String,
    pub instrument: String,
    pub n: usize,
    pub dropped_rows: usize,
    pub encoding: String,
    pub instrument_levels: Vec<f64>,
    /// Raw instrument values merged into each level, when levels were collapsed.
    pub merged_levels: Option<Vec<Vec<f64>>>,
}

impl Provenance {
    pub fn new(file: Option<String>, columns: &Columns, n: usize, dropped_rows: usize, encoding: &str, levels: &[f64]) -> Self {
        Self {
            file,
            outcome: columns.outcome.clone(),
            exposure: columns.exposure.clone(),
            instrument: columns.instrument.clone(),
            n,
            dropped_rows,
            encoding: encoding.to_string(),
            instrument_levels: levels.to_vec(),
            merged_levels: None,
        }
    }

    pub fn with_merges(mut self, merges: &MergeReport) -> Self {
        if merges.merged_any() {
            self.merged_levels = Some(merges.groups.clone());
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema: u32,
    pub model: String,
    pub moment_system: String,
    pub steps: u8,
    pub n: usize,
    pub estimates: Vec<EstimateRow>,
    /// Mean exposure-free outcome implied by an expanded fit (no standard error).
    pub derived_alpha0: Option<f64>,
    pub j_statistic: Option<f64>,
    pub j_df: Option<usize>,
    pub j_p_value: Option<f64>,
    pub convergence: Convergence,
    pub se_note: Option<String>,
    pub provenance: Provenance,
}

impl FitReport {
    pub fn new(model: &str, fit: &GmmFit, data: &EstimationData, provenance: Provenance) -> Self {
        let estimates = fit
            .param_names
            .iter()
            .zip(fit.theta.iter().zip(&fit.standard_errors))
            .map(|(name, (&est, &se))| {
                let exponentiate = match name.as_str() {
                    "psi0" => fit.model.exponentiates(),
                    "alpha0_star" => true,
                    _ => false,
                };
                EstimateRow::new(name, est, se, exponentiate)
            })
            .collect();
        Self {
            schema: SCHEMA_VERSION,
            model: model.to_string(),
            moment_system: fit.label.to_string(),
            steps: fit.steps,
            n: fit.n,
            estimates,
            derived_alpha0: fit.model.is_expanded().then(|| derived_alpha0(fit, data)),
            j_statistic: fit.j_test.map(|j| j.statistic),
            j_df: fit.j_test.map(|j| j.df),
            j_p_value: fit.j_test.map(|j| j.p_value),
            convergence: Convergence { converged: fit.converged, iterations: fit.iterations, objective: fit.objective },
            se_note: fit.se_note.map(str::to_string),
            provenance,
        }
    }

    pub fn estimate(&self, name: &str) -> Option<&EstimateRow> {
        self.estimates.iter().find(|e| e.name == name)
    }
}

/// Sample mean of the exposure-free outcome proxy at the fitted effect.
fn derived_alpha0(fit: &GmmFit, data: &EstimationData) -> f64 {
    let psi = fit.psi0();
    let n = data.n();
    let total: f64 = match fit.model {
        ModelKind::AdditiveExpanded => (0..n).map(|i| data.y[i] - psi * data.x[i]).sum(),
        ModelKind::MultExpanded => (0..n).map(|i| data.y[i] * (-psi * data.x[i]).exp()).sum(),
        _ => {
            let beta = nalgebra::DVector::from_column_slice(&fit.estimates.beta);
            let fitted = &data.r * beta;
            (0..n).map(|i| expit(fitted[i] - psi * data.x[i])).sum()
        }
    };
    total / n as f64
}
