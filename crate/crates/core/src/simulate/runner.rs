//! Parallel Monte Carlo replications with deterministic aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::design::SimDesign;
use crate::data::{Dataset, EstimationData, InstrumentSpec};
use crate::error::{Result, SmmError};
use crate::estimator::{fit_2sgmm_logistic, fit_2sls_additive, fit_model, GmmFit};
use crate::late::{decompose, DecompositionForm};
use crate::moments::ModelKind;
use crate::numerics::RngStream;

/// Share of failed or non-converged replications above which a summary is
/// flagged unreliable.
pub const UNRELIABLE_SHARE: f64 = 0.01;

/// Estimation method, named as on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Model(ModelKind),
    Tsls,
    LogisticTwoStage,
    Decompose(DecompositionForm),
}

impl Method {
    pub const NAMES: [&'static str; 11] = [
        "additive",
        "mult",
        "mult-log",
        "mult-ratio",
        "logistic",
        "logistic-2sgmm",
        "logistic-plugin",
        "2sls",
        "late",
        "lrr",
        "ilrr",
    ];

    /// Parses a method name; `expanded` selects the stacked moment system that
    /// also estimates the instrument means.
    pub fn parse(name: &str, expanded: bool) -> Result<Self> {
        let method = match name {
            "additive" if expanded => Method::Model(ModelKind::AdditiveExpanded),
            "mult" if expanded => Method::Model(ModelKind::MultExpanded),
            "logistic" if expanded => Method::Model(ModelKind::LogisticExpanded),
            _ if expanded => {
                return Err(SmmError::InvalidInput(format!(
                    "expanded moments are available for additive, mult and logistic, not `{name}`"
                )))
            }
            "additive" => Method::Model(ModelKind::Additive),
            "mult" => Method::Model(ModelKind::MultMmom0),
            "mult-log" => Method::Model(ModelKind::MultMmom1),
            "mult-ratio" => Method::Model(ModelKind::MultMmomc),
            "logistic" => Method::Model(ModelKind::LogisticJoint),
            "logistic-2sgmm" => Method::LogisticTwoStage,
            "logistic-plugin" => Method::Model(ModelKind::LogisticPlugin),
            "2sls" => Method::Tsls,
            "late" => Method::Decompose(DecompositionForm::Late),
            "lrr" => Method::Decompose(DecompositionForm::Lrr),
            "ilrr" => Method::Decompose(DecompositionForm::Ilrr),
            _ => {
                return Err(SmmError::InvalidInput(format!(
                    "unknown estimator `{name}`; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        Ok(method)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Model(ModelKind::Additive) => "additive",
            Method::Model(ModelKind::MultMmom0) => "mult",
            Method::Model(ModelKind::MultMmom1) => "mult-log",
            Method::Model(ModelKind::MultMmomc) => "mult-ratio",
            Method::Model(ModelKind::LogisticJoint) => "logistic",
            Method::Model(ModelKind::LogisticPlugin) => "logistic-plugin",
            Method::Model(ModelKind::AdditiveExpanded) => "additive-expanded",
            Method::Model(ModelKind::MultExpanded) => "mult-expanded",
            Method::Model(ModelKind::LogisticExpanded) => "logistic-expanded",
            Method::LogisticTwoStage => "logistic-2sgmm",
            Method::Tsls => "2sls",
            Method::Decompose(f) => f.name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_suffix("-expanded") {
            Some(base) => Self::parse(base, true),
            None => Self::parse(s, false),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub method: Method,
    pub steps: u8,
}

impl EstimatorSpec {
    pub fn new(method: Method, steps: u8) -> Result<Self> {
        if !(1..=2).contains(&steps) {
            return Err(SmmError::InvalidInput(format!("steps must be 1 or 2, got {steps}")));
        }
        Ok(Self { method, steps })
    }

    /// Fits a GMM-type method with indicator instruments.
    pub fn fit(&self, ds: &Dataset) -> Result<GmmFit> {
        self.fit_data(&EstimationData::new(ds, &InstrumentSpec::indicators(ds.levels()))?)
    }

    /// Fits a GMM-type method to already encoded data.
    pub fn fit_data(&self, data: &EstimationData) -> Result<GmmFit> {
        match self.method {
            Method::Model(kind) => fit_model(kind, data, self.steps),
            Method::Tsls => fit_2sls_additive(data),
            Method::LogisticTwoStage => fit_2sgmm_logistic(data, self.steps),
            Method::Decompose(_) => Err(SmmError::InvalidInput(format!(
                "`{}` is a decomposition, not a fitted model",
                self.method
            ))),
        }
    }

    fn replicate(&self, ds: &Dataset) -> Result<Replicate> {
        if let Method::Decompose(form) = self.method {
            let d = decompose(ds, form)?;
            let k = d.adjacent_estimates.len();
            let mut names: Vec<String> = (1..=k).map(|j| format!("estimate_{j}")).collect();
            names.extend((1..=k).map(|j| format!("weight_{j}")));
            names.push("weighted_average".into());
            let mut values = d.adjacent_estimates;
            values.extend(d.weights);
            values.push(d.weighted_average);
            return Ok(Replicate { ses: vec![None; values.len()], names, values, j: None, converged: true });
        }
        let fit = self.fit(ds)?;
        Ok(Replicate {
            names: fit.param_names.clone(),
            values: fit.theta.iter().copied().collect(),
            ses: fit.standard_errors.iter().map(|&s| Some(s)).collect(),
            j: fit.j_test.map(|j| (j.statistic, j.p_value, j.df)),
            converged: fit.converged,
        })
    }
}

struct Replicate {
    names: Vec<String>,
    values: Vec<f64>,
    ses: Vec<Option<f64>>,
    j: Option<(f64, f64, usize)>,
    converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    /// Monte Carlo standard deviation; absent with a single usable replication.
    pub sd: Option<f64>,
    /// Mean of the estimated standard errors.
    pub mean_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JSummary {
    pub df: usize,
    pub mean: f64,
    pub variance: Option<f64>,
    pub reject_rate_5pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub design: String,
    pub estimator: String,
    pub steps: u8,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    /// Replications included in the summary.
    pub used: usize,
    pub not_converged: usize,
    pub failed: usize,
    pub unreliable: bool,
    pub parameters: Vec<ParamSummary>,
    pub j_test: Option<JSummary>,
    /// Error messages of failed replications with their counts.
    pub failures: BTreeMap<String, usize>,
}

impl McSummary {
    pub fn parameter(&self, name: &str) -> Option<&ParamSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

fn mean_sd(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, sd)
}

/// Runs `reps` independent replications of `design` at sample size `n`.
/// Replication `r` draws from stream `r` of `master_seed`, so the summary is
/// bitwise identical for any thread count.
pub fn run_replications(
    design: &SimDesign,
    estimator: &EstimatorSpec,
    reps: usize,
    n: usize,
    master_seed: u64,
) -> Result<McSummary> {
    if reps == 0 {
        return Err(SmmError::InvalidInput("reps must be at least 1".into()));
    }
    if n == 0 {
        return Err(SmmError::InvalidInput("n must be at least 1".into()));
    }
    design.validate()?;

    let outcomes: Vec<Result<Replicate>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngStream::new(master_seed, r as u64);
            let ds = design.draw(n, &mut rng)?;
            estimator.replicate(&ds)
        })
        .collect();

    let mut failures = BTreeMap::new();
    let mut not_converged = 0;
    let mut used: Vec<Replicate> = Vec::with_capacity(reps);
    for outcome in outcomes {
        match outcome {
            Ok(rep) if !rep.converged => not_converged += 1,
            Ok(rep) => match used.first() {
                Some(first) if first.names != rep.names => {
                    *failures.entry("parameter layout differs from the first replication".to_string()).or_insert(0) += 1;
                }
                _ => used.push(rep),
            },
            Err(e) => *failures.entry(e.to_string()).or_insert(0) += 1,
        }
    }
    let failed: usize = failures.values().sum();

    let names = used.first().map(|r| r.names.clone()).unwrap_or_default();
    let parameters = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let values: Vec<f64> = used.iter().map(|r| r.values[j]).collect();
            let (mean, sd) = mean_sd(&values);
            let ses: Option<Vec<f64>> = used.iter().map(|r| r.ses[j]).collect();
            ParamSummary { name: name.clone(), mean, sd, mean_se: ses.map(|s| mean_sd(&s).0) }
        })
        .collect();

    let js: Vec<(f64, f64, usize)> = used.iter().filter_map(|r| r.j).collect();
    let j_test = (!js.is_empty() && js.len() == used.len()).then(|| {
        let stats: Vec<f64> = js.iter().map(|j| j.0).collect();
        let (mean, sd) = mean_sd(&stats);
        let rejections = js.iter().filter(|j| j.1 < 0.05).count();
        JSummary { df: js[0].2, mean, variance: sd.map(|s| s * s), reject_rate_5pct: rejections as f64 / js.len() as f64 }
    });

    Ok(McSummary {
        design: design.name().into(),
        estimator: estimator.method.name().into(),
        steps: estimator.steps,
        n,
        reps,
        seed: master_seed,
        used: used.len(),
        not_converged,
        failed,
        unreliable: (not_converged + failed) as f64 > UNRELIABLE_SHARE * reps as f64,
        parameters,
        j_test,
        failures,
    })
}
