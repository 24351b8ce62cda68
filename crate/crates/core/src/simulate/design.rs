//! Data-generating processes for the Monte Carlo studies.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SmmError};
use crate::late::{decompose_moments, sort_by_exposure, DecompositionForm, LateDecomposition, LevelMoments};
use crate::numerics::{bivariate_normal_cdf, expit, logit, normal_cdf, normal_quantile, RngStream};

/// Tolerance for the check that a built-in design's coefficients satisfy
/// conditional mean independence.
pub const CMI_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Log,
    Logit,
}

impl Link {
    pub fn apply(self, mean: f64) -> f64 {
        match self {
            Link::Identity => mean,
            Link::Log => mean.ln(),
            Link::Logit => logit(mean),
        }
    }

    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
            Link::Logit => expit(eta),
        }
    }
}

/// Coefficients of the outcome linear predictor in the three-level designs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub intercept: f64,
    /// Exposure main effect excluding the causal effect.
    pub exposure: f64,
    pub z1: f64,
    pub z2: f64,
    pub exposure_z1: f64,
    pub exposure_z2: f64,
}

/// Shifts added to the instrument main effects; nonzero values make that
/// instrument invalid.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Perturbation {
    pub z1_offset: f64,
    pub z2_offset: f64,
}

impl Perturbation {
    pub fn is_none(&self) -> bool {
        self.z1_offset == 0.0 && self.z2_offset == 0.0
    }
}

/// Three-level instrument, binary exposure with P(X=1|Z=z) = baseline + slope·z,
/// and E(Y|X,Z) = link⁻¹(linear predictor + effect·X).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDesign {
    pub link: Link,
    pub effect: f64,
    pub coefficients: Coefficients,
    pub exposure_baseline: f64,
    pub exposure_slope: f64,
    pub level_probs: Vec<f64>,
    pub perturbation: Perturbation,
}

impl LinkDesign {
    /// Log-link design with a multiplicative causal effect of 0.6.
    pub fn m1() -> Self {
        Self {
            link: Link::Log,
            effect: 0.6,
            coefficients: Coefficients {
                intercept: -1.6976,
                exposure: 0.15,
                z1: -0.3186,
                z2: 0.2511,
                exposure_z1: 0.6,
                exposure_z2: -0.6,
            },
            exposure_baseline: 0.2321,
            exposure_slope: 0.15,
            level_probs: vec![0.5, 0.3, 0.2],
            perturbation: Perturbation::default(),
        }
    }

    /// Logit-link design with a causal log odds ratio of 0.6.
    #[allow(clippy::approx_constant)]
    pub fn m2() -> Self {
        Self {
            link: Link::Logit,
            effect: 0.6,
            coefficients: Coefficients {
                intercept: -1.518,
                exposure: 0.15,
                z1: 0.3183,
                z2: -0.5202,
                exposure_z1: -0.6,
                exposure_z2: 0.6,
            },
            exposure_baseline: 0.4404,
            exposure_slope: 0.15,
            level_probs: vec![0.5, 0.3, 0.2],
            perturbation: Perturbation::default(),
        }
    }

    fn predictor(&self, x: f64, level: usize, with_effect: bool) -> f64 {
        let c = &self.coefficients;
        let (z1, z2) = (f64::from(level == 1), f64::from(level == 2));
        let effect = if with_effect { self.effect } else { 0.0 };
        c.intercept
            + (c.exposure + effect) * x
            + (c.z1 + self.perturbation.z1_offset) * z1
            + (c.z2 + self.perturbation.z2_offset) * z2
            + c.exposure_z1 * x * z1
            + c.exposure_z2 * x * z2
    }

    fn cells(&self) -> Vec<Cell> {
        (0..self.level_probs.len())
            .map(|l| Cell {
                prob: self.level_probs[l],
                exposed: self.exposure_baseline + self.exposure_slope * l as f64,
                mean_unexposed: self.link.inverse(self.predictor(0.0, l, true)),
                mean_exposed: self.link.inverse(self.predictor(1.0, l, true)),
                untreated_mean_exposed: self.link.inverse(self.predictor(1.0, l, false)),
            })
            .collect()
    }
}

/// K-level binary design built from per-level exposure rates and exposure-free
/// outcome means among the exposed. Unexposed means are solved so that every
/// level has the same exposure-free mean, so both identifying conditions hold
/// by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelDesign {
    pub link: Link,
    pub effect: f64,
    /// E(Y₀), common to all levels.
    pub untreated_mean: f64,
    pub level_probs: Vec<f64>,
    pub exposure_probs: Vec<f64>,
    /// E(Y₀ | X=1, Z=l).
    pub untreated_mean_exposed: Vec<f64>,
}

impl LevelDesign {
    /// Four-level example used in tests and the acceptance suite.
    pub fn example(link: Link, effect: f64) -> Self {
        Self {
            link,
            effect,
            untreated_mean: 0.3,
            level_probs: vec![0.3, 0.3, 0.2, 0.2],
            exposure_probs: vec![0.2, 0.35, 0.5, 0.7],
            untreated_mean_exposed: vec![0.4, 0.36, 0.34, 0.33],
        }
    }

    fn cells(&self) -> Vec<Cell> {
        (0..self.level_probs.len())
            .map(|l| {
                let p = self.exposure_probs[l];
                let a = self.untreated_mean_exposed[l];
                Cell {
                    prob: self.level_probs[l],
                    exposed: p,
                    mean_unexposed: (self.untreated_mean - p * a) / (1.0 - p),
                    mean_exposed: self.link.inverse(self.link.apply(a) + self.effect),
                    untreated_mean_exposed: a,
                }
            })
            .collect()
    }
}

/// Latent-index design: X = 1{c_Z > V}, Y = 1{b₀ + b₁X > U}, (U, V) standard
/// bivariate normal with correlation `correlation`, thresholds chosen so that
/// P(X=1|Z=l) = `exposure_probs[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbitDesign {
    pub outcome_intercept: f64,
    pub outcome_exposure: f64,
    pub correlation: f64,
    pub level_probs: Vec<f64>,
    pub exposure_probs: Vec<f64>,
}

impl Default for ProbitDesign {
    fn default() -> Self {
        Self {
            outcome_intercept: normal_quantile(0.4).expect("0.4 is a valid probability"),
            outcome_exposure: 0.5,
            correlation: 0.8,
            level_probs: vec![0.25; 4],
            exposure_probs: vec![0.1, 0.2, 0.3, 0.4],
        }
    }
}

impl ProbitDesign {
    pub fn thresholds(&self) -> Result<Vec<f64>> {
        self.exposure_probs.iter().map(|&p| normal_quantile(p)).collect()
    }
}

/// Binary exposure is replaced by X | Z=l ~ N(m_l, sd²) and
/// logit E(Y|X,Z) = intercept + effect·X + confounding·(X − m_Z).
/// The exposure-free mean is then the same at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousDesign {
    pub effect: f64,
    pub intercept: f64,
    pub confounding: f64,
    pub level_probs: Vec<f64>,
    pub exposure_means: Vec<f64>,
    pub exposure_sd: f64,
}

impl Default for ContinuousDesign {
    fn default() -> Self {
        Self {
            effect: 0.4,
            intercept: -1.0,
            confounding: 0.5,
            level_probs: vec![0.3, 0.3, 0.2, 0.2],
            exposure_means: vec![0.0, 0.4, 0.8, 1.2],
            exposure_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimDesign {
    M1(LinkDesign),
    M2(LinkDesign),
    ProbitLate(ProbitDesign),
    Levels(LevelDesign),
    ContinuousLogistic(ContinuousDesign),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    prob: f64,
    exposed: f64,
    mean_unexposed: f64,
    mean_exposed: f64,
    untreated_mean_exposed: f64,
}

impl Cell {
    fn untreated_mean(&self) -> f64 {
        (1.0 - self.exposed) * self.mean_unexposed + self.exposed * self.untreated_mean_exposed
    }
}

fn in_unit_interval(v: f64) -> bool {
    v > 0.0 && v < 1.0
}

fn check_probs(probs: &[f64], what: &str) -> Result<()> {
    if probs.len() < 2 {
        return Err(SmmError::InvalidDesign(format!("{what}: need at least 2 instrument levels")));
    }
    if probs.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(SmmError::InvalidDesign(format!("{what}: probabilities must be positive")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SmmError::InvalidDesign(format!("{what}: probabilities sum to {total}, not 1")));
    }
    Ok(())
}

fn check_len(len: usize, expected: usize, what: &str) -> Result<()> {
    if len != expected {
        return Err(SmmError::InvalidDesign(format!("{what} has {len} entries; expected {expected}")));
    }
    Ok(())
}

fn categorical(rng: &mut RngStream, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (l, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return l;
        }
    }
    probs.len() - 1
}

fn bernoulli(rng: &mut RngStream, p: f64) -> f64 {
    f64::from(rng.random::<f64>() < p)
}

impl SimDesign {
    pub fn m1() -> Self {
        SimDesign::M1(LinkDesign::m1())
    }

    pub fn m2() -> Self {
        SimDesign::M2(LinkDesign::m2())
    }

    pub fn probit_late() -> Self {
        SimDesign::ProbitLate(ProbitDesign::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            SimDesign::M1(_) => "m1",
            SimDesign::M2(_) => "m2",
            SimDesign::ProbitLate(_) => "probit_late",
            SimDesign::Levels(_) => "levels",
            SimDesign::ContinuousLogistic(_) => "continuous_logistic",
        }
    }

    pub fn level_probs(&self) -> &[f64] {
        match self {
            SimDesign::M1(d) | SimDesign::M2(d) => &d.level_probs,
            SimDesign::ProbitLate(d) => &d.level_probs,
            SimDesign::Levels(d) => &d.level_probs,
            SimDesign::ContinuousLogistic(d) => &d.level_probs,
        }
    }

    /// Causal parameter the design's structural model is built around.
    pub fn effect(&self) -> Option<f64> {
        match self {
            SimDesign::M1(d) | SimDesign::M2(d) => Some(d.effect),
            SimDesign::Levels(d) => Some(d.effect),
            SimDesign::ContinuousLogistic(d) => Some(d.effect),
            SimDesign::ProbitLate(_) => None,
        }
    }

    fn cells(&self) -> Option<Vec<Cell>> {
        match self {
            SimDesign::M1(d) | SimDesign::M2(d) => Some(d.cells()),
            SimDesign::Levels(d) => Some(d.cells()),
            _ => None,
        }
    }

    /// Checks lengths, probabilities and that every conditional mean lies in (0, 1).
    pub fn validate(&self) -> Result<()> {
        check_probs(self.level_probs(), "level_probs")?;
        let k = self.level_probs().len();
        match self {
            SimDesign::M1(d) | SimDesign::M2(d) => {
                check_len(k, 3, "level_probs")?;
                let expected = if matches!(self, SimDesign::M1(_)) { Link::Log } else { Link::Logit };
                if d.link != expected {
                    return Err(SmmError::InvalidDesign(format!("{} uses the {:?} link", self.name(), expected)));
                }
            }
            SimDesign::Levels(d) => {
                check_len(d.exposure_probs.len(), k, "exposure_probs")?;
                check_len(d.untreated_mean_exposed.len(), k, "untreated_mean_exposed")?;
            }
            SimDesign::ProbitLate(d) => {
                check_len(d.exposure_probs.len(), k, "exposure_probs")?;
                if d.exposure_probs.iter().any(|&p| !in_unit_interval(p)) {
                    return Err(SmmError::InvalidDesign("exposure_probs must lie in (0, 1)".into()));
                }
                if !(d.correlation.abs() < 1.0) {
                    return Err(SmmError::InvalidDesign(format!("correlation {} must lie in (-1, 1)", d.correlation)));
                }
            }
            SimDesign::ContinuousLogistic(d) => {
                check_len(d.exposure_means.len(), k, "exposure_means")?;
                if !(d.exposure_sd > 0.0) {
                    return Err(SmmError::InvalidDesign("exposure_sd must be positive".into()));
                }
            }
        }
        if let Some(cells) = self.cells() {
            for (l, c) in cells.iter().enumerate() {
                for (what, v) in [
                    ("P(X=1|Z)", c.exposed),
                    ("E(Y|X=0,Z)", c.mean_unexposed),
                    ("E(Y|X=1,Z)", c.mean_exposed),
                    ("E(Y0|X=1,Z)", c.untreated_mean_exposed),
                ] {
                    if !in_unit_interval(v) {
                        return Err(SmmError::InvalidDesign(format!("{what} = {v} at instrument level {l} is outside (0, 1)")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Draws `n` observations; instrument values are the level indices.
    pub fn draw(&self, n: usize, rng: &mut RngStream) -> Result<Dataset> {
        self.validate()?;
        let probs = self.level_probs();
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        match self {
            SimDesign::M1(_) | SimDesign::M2(_) | SimDesign::Levels(_) => {
                let cells = self.cells().expect("binary designs have cells");
                for _ in 0..n {
                    let l = categorical(rng, probs);
                    let c = &cells[l];
                    let xi = bernoulli(rng, c.exposed);
                    let m = if xi == 1.0 { c.mean_exposed } else { c.mean_unexposed };
                    z.push(l);
                    x.push(xi);
                    y.push(bernoulli(rng, m));
                }
            }
            SimDesign::ProbitLate(d) => {
                let thresholds = d.thresholds()?;
                let tail = (1.0 - d.correlation * d.correlation).sqrt();
                for _ in 0..n {
                    let l = categorical(rng, probs);
                    let e1: f64 = rng.sample(StandardNormal);
                    let e2: f64 = rng.sample(StandardNormal);
                    let v = e1;
                    let u = d.correlation * e1 + tail * e2;
                    let xi = f64::from(thresholds[l] > v);
                    z.push(l);
                    x.push(xi);
                    y.push(f64::from(d.outcome_intercept + d.outcome_exposure * xi > u));
                }
            }
            SimDesign::ContinuousLogistic(d) => {
                for _ in 0..n {
                    let l = categorical(rng, probs);
                    let e: f64 = rng.sample(StandardNormal);
                    let xi = d.exposure_means[l] + d.exposure_sd * e;
                    let eta = d.intercept + d.effect * xi + d.confounding * (xi - d.exposure_means[l]);
                    z.push(l);
                    x.push(xi);
                    y.push(bernoulli(rng, expit(eta)));
                }
            }
        }
        let values = (0..probs.len()).map(|l| l as f64).collect();
        Dataset::from_levels(y, x, z, values)
    }

    /// Population E(Y₀ | Z=l) for the binary designs.
    pub fn untreated_level_means(&self) -> Option<Vec<f64>> {
        self.cells().map(|cells| cells.iter().map(Cell::untreated_mean).collect())
    }

    /// Population E(Y₀).
    pub fn untreated_mean(&self) -> Option<f64> {
        let means = self.untreated_level_means()?;
        Some(means.iter().zip(self.level_probs()).map(|(m, p)| m * p).sum())
    }

    /// Population E(Y).
    pub fn outcome_mean(&self) -> Option<f64> {
        let cells = self.cells()?;
        Some(cells.iter().map(|c| c.prob * ((1.0 - c.exposed) * c.mean_unexposed + c.exposed * c.mean_exposed)).sum())
    }

    /// Confirms that E(Y₀|Z) is constant across levels to within [`CMI_TOL`].
    pub fn verify_cmi(&self) -> Result<()> {
        let Some(means) = self.untreated_level_means() else {
            return Ok(());
        };
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > CMI_TOL {
            return Err(SmmError::InvalidDesign(format!(
                "exposure-free means differ across instrument levels: {means:?}"
            )));
        }
        Ok(())
    }
}

/// Population level moments of the latent-index design, from bivariate normal
/// orthant probabilities.
pub fn probit_level_moments(design: &ProbitDesign) -> Result<Vec<LevelMoments>> {
    SimDesign::ProbitLate(design.clone()).validate()?;
    let thresholds = design.thresholds()?;
    let (b0, b1, rho) = (design.outcome_intercept, design.outcome_exposure, design.correlation);
    let untreated = normal_cdf(b0);
    let moments = thresholds
        .iter()
        .enumerate()
        .map(|(l, &c)| {
            // P(X=1, Y=1) and P(X=0, Y=1)
            let both = bivariate_normal_cdf(c, b0 + b1, rho);
            let unexposed_cases = untreated - bivariate_normal_cdf(c, b0, rho);
            LevelMoments {
                level: l,
                value: l as f64,
                prob: design.level_probs[l],
                mean_x: design.exposure_probs[l],
                mean_y: both + unexposed_cases,
                mean_yx: both,
                mean_y_xm1: -unexposed_cases,
            }
        })
        .collect();
    sort_by_exposure(moments)
}

/// Population local risk ratios, τ weights and their weighted average.
pub fn probit_population_quantities(design: &ProbitDesign) -> Result<LateDecomposition> {
    decompose_moments(&probit_level_moments(design)?, DecompositionForm::Lrr)
}
