//! Local average treatment effect and local risk ratio decompositions.
//!
//! With a K-valued instrument ordered so that E(X|Z=k) increases in k, the
//! linear IV estimand is a weighted sum of adjacent-level Wald ratios, and the
//! multiplicative estimand is a weighted sum of adjacent local risk ratios.
//! Everything here works from per-level means, so the same code serves sample
//! and population quantities.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SmmError};

/// Level means whose increments are considered equal below this threshold.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelMoments {
    /// Level index in the source dataset.
    pub level: usize,
    /// Raw instrument value.
    pub value: f64,
    /// P(Z = level).
    pub prob: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    /// E(YX | Z).
    pub mean_yx: f64,
    /// E{Y(X − 1) | Z}.
    pub mean_y_xm1: f64,
}

/// Empirical level moments over observed levels, sorted by E(X|Z) ascending.
pub fn level_moments(ds: &Dataset) -> Result<Vec<LevelMoments>> {
    let k = ds.levels();
    let mut acc = vec![[0.0f64; 5]; k];
    for i in 0..ds.n() {
        let (y, x) = (ds.y()[i], ds.x()[i]);
        let a = &mut acc[ds.z()[i]];
        a[0] += 1.0;
        a[1] += x;
        a[2] += y;
        a[3] += y * x;
        a[4] += y * (x - 1.0);
    }
    let n = ds.n() as f64;
    let moments = acc
        .iter()
        .enumerate()
        .filter(|(_, a)| a[0] > 0.0)
        .map(|(level, a)| LevelMoments {
            level,
            value: ds.level_values()[level],
            prob: a[0] / n,
            mean_x: a[1] / a[0],
            mean_y: a[2] / a[0],
            mean_yx: a[3] / a[0],
            mean_y_xm1: a[4] / a[0],
        })
        .collect();
    sort_by_exposure(moments)
}

/// Sorts by E(X|Z) and rejects ties and single-level inputs.
pub fn sort_by_exposure(mut moments: Vec<LevelMoments>) -> Result<Vec<LevelMoments>> {
    if moments.len() < 2 {
        return Err(SmmError::DegenerateInstrument(format!(
            "{} observed instrument level(s); a decomposition needs at least 2",
            moments.len()
        )));
    }
    moments.sort_by(|a, b| a.mean_x.total_cmp(&b.mean_x).then(a.level.cmp(&b.level)));
    check_increments(&moments, |m| m.mean_x, "E(X|Z)")?;
    Ok(moments)
}

fn check_increments(moments: &[LevelMoments], f: impl Fn(&LevelMoments) -> f64, what: &'static str) -> Result<()> {
    for w in moments.windows(2) {
        if (f(&w[1]) - f(&w[0])).abs() < TIE_TOL {
            return Err(SmmError::DegenerateIncrement { lower: w[0].level, upper: w[1].level, what });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecompositionForm {
    /// Adjacent Wald ratios with μ weights (additive scale).
    Late,
    /// Local risk ratios with τ weights.
    Lrr,
    /// Inverse local risk ratios with μ weights on the YX scale.
    Ilrr,
}

impl DecompositionForm {
    pub fn name(self) -> &'static str {
        match self {
            DecompositionForm::Late => "late",
            DecompositionForm::Lrr => "lrr",
            DecompositionForm::Ilrr => "ilrr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LateDecomposition {
    pub form: DecompositionForm,
    /// Source level indices in the order used (E(X|Z) ascending).
    pub levels: Vec<usize>,
    pub level_values: Vec<f64>,
    pub level_probs: Vec<f64>,
    /// Estimate for increment k (between sorted levels k−1 and k), k = 1..K−1.
    pub adjacent_estimates: Vec<f64>,
    pub weights: Vec<f64>,
    pub weighted_average: f64,
    /// E(X|Z) strictly increasing in the sorted order, plus for the risk-ratio
    /// forms the required increases in E(YX|Z) and E{Y(X−1)|Z}.
    pub monotonicity_ok: bool,
    /// Every weight lies in [0, 1].
    pub weights_valid: bool,
    /// Wald ratios against the lowest level (additive form only).
    pub reference_estimates: Option<Vec<f64>>,
    /// λ weights for `reference_estimates`.
    pub lambda_weights: Option<Vec<f64>>,
    /// E(X|Z=1) > E(X) in sorted order, so that the λ weights are convex.
    pub lambda_valid: Option<bool>,
}

/// Adjacent-increment weights `Δa_k · Σ_{l≥k}(b_l − b̄)π_l / Σ_l a_l(b_l − b̄)π_l`.
fn increment_weights(moments: &[LevelMoments], a: impl Fn(&LevelMoments) -> f64, b: impl Fn(&LevelMoments) -> f64) -> Vec<f64> {
    let bbar: f64 = moments.iter().map(|m| b(m) * m.prob).sum::<f64>() / total_prob(moments);
    let denom: f64 = moments.iter().map(|m| a(m) * (b(m) - bbar) * m.prob).sum();
    (1..moments.len())
        .map(|k| {
            let tail: f64 = moments[k..].iter().map(|m| (b(m) - bbar) * m.prob).sum();
            (a(&moments[k]) - a(&moments[k - 1])) * tail / denom
        })
        .collect()
}

fn total_prob(moments: &[LevelMoments]) -> f64 {
    moments.iter().map(|m| m.prob).sum()
}

fn ratios(moments: &[LevelMoments], num: impl Fn(&LevelMoments) -> f64, den: impl Fn(&LevelMoments) -> f64) -> Vec<f64> {
    moments.windows(2).map(|w| (num(&w[1]) - num(&w[0])) / (den(&w[1]) - den(&w[0]))).collect()
}

fn strictly_increasing(moments: &[LevelMoments], f: impl Fn(&LevelMoments) -> f64) -> bool {
    moments.windows(2).all(|w| f(&w[1]) > f(&w[0]))
}

fn convex(weights: &[f64]) -> bool {
    weights.iter().all(|&w| (-1e-12..=1.0 + 1e-12).contains(&w))
}

/// Decomposition from level moments already sorted by E(X|Z).
pub fn decompose_moments(moments: &[LevelMoments], form: DecompositionForm) -> Result<LateDecomposition> {
    if moments.len() < 2 {
        return Err(SmmError::DegenerateInstrument("a decomposition needs at least 2 instrument levels".into()));
    }
    let x_increasing = strictly_increasing(moments, |m| m.mean_x);
    let (adjacent_estimates, weights, monotonicity_ok) = match form {
        DecompositionForm::Late => {
            check_increments(moments, |m| m.mean_x, "E(X|Z)")?;
            let est = ratios(moments, |m| m.mean_y, |m| m.mean_x);
            let w = increment_weights(moments, |m| m.mean_x, |m| m.mean_x);
            (est, w, x_increasing)
        }
        DecompositionForm::Ilrr => {
            check_increments(moments, |m| m.mean_yx, "E(YX|Z)")?;
            let est = ratios(moments, |m| m.mean_y_xm1, |m| m.mean_yx);
            let w = increment_weights(moments, |m| m.mean_yx, |m| m.mean_yx);
            (est, w, x_increasing && strictly_increasing(moments, |m| m.mean_yx))
        }
        DecompositionForm::Lrr => {
            check_increments(moments, |m| m.mean_yx, "E(YX|Z)")?;
            check_increments(moments, |m| m.mean_y_xm1, "E{Y(X-1)|Z}")?;
            let est = ratios(moments, |m| m.mean_yx, |m| m.mean_y_xm1);
            let w = increment_weights(moments, |m| m.mean_y_xm1, |m| m.mean_yx);
            let ok = x_increasing
                && strictly_increasing(moments, |m| m.mean_yx)
                && strictly_increasing(moments, |m| m.mean_y_xm1);
            (est, w, ok)
        }
    };
    let weighted_average = weights.iter().zip(&adjacent_estimates).map(|(w, e)| w * e).sum();

    let (reference_estimates, lambda_weights, lambda_valid) = if form == DecompositionForm::Late {
        let base = &moments[0];
        let est: Vec<f64> =
            moments[1..].iter().map(|m| (m.mean_y - base.mean_y) / (m.mean_x - base.mean_x)).collect();
        let xbar: f64 = moments.iter().map(|m| m.mean_x * m.prob).sum::<f64>() / total_prob(moments);
        let denom: f64 = moments.iter().map(|m| m.mean_x * (m.mean_x - xbar) * m.prob).sum();
        let lambda: Vec<f64> =
            moments[1..].iter().map(|m| (m.mean_x - base.mean_x) * (m.mean_x - xbar) * m.prob / denom).collect();
        (Some(est), Some(lambda), Some(moments[1].mean_x > xbar))
    } else {
        (None, None, None)
    };

    Ok(LateDecomposition {
        form,
        levels: moments.iter().map(|m| m.level).collect(),
        level_values: moments.iter().map(|m| m.value).collect(),
        level_probs: moments.iter().map(|m| m.prob).collect(),
        weights_valid: convex(&weights),
        adjacent_estimates,
        weights,
        weighted_average,
        monotonicity_ok,
        reference_estimates,
        lambda_weights,
        lambda_valid,
    })
}

fn require_binary(ds: &Dataset) -> Result<()> {
    if !ds.is_binary_exposure() || !ds.is_binary_outcome() {
        return Err(SmmError::InvalidInput("risk-ratio decompositions need binary exposure and outcome".into()));
    }
    Ok(())
}

pub fn decompose(ds: &Dataset, form: DecompositionForm) -> Result<LateDecomposition> {
    if form != DecompositionForm::Late {
        require_binary(ds)?;
    }
    decompose_moments(&level_moments(ds)?, form)
}

/// Adjacent Wald ratios β_{k,k−1} in E(X|Z) order.
pub fn adjacent_wald(ds: &Dataset) -> Result<Vec<f64>> {
    Ok(decompose(ds, DecompositionForm::Late)?.adjacent_estimates)
}

pub fn mu_weights(ds: &Dataset) -> Result<Vec<f64>> {
    Ok(decompose(ds, DecompositionForm::Late)?.weights)
}

pub fn lambda_weights(ds: &Dataset) -> Result<Vec<f64>> {
    Ok(decompose(ds, DecompositionForm::Late)?.lambda_weights.expect("additive form carries λ weights"))
}

pub fn late_decomposition(ds: &Dataset) -> Result<LateDecomposition> {
    decompose(ds, DecompositionForm::Late)
}

pub fn lrr_decomposition(ds: &Dataset) -> Result<LateDecomposition> {
    decompose(ds, DecompositionForm::Lrr)
}

pub fn ilrr_decomposition(ds: &Dataset) -> Result<LateDecomposition> {
    decompose(ds, DecompositionForm::Ilrr)
}
