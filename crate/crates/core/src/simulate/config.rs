//! Plain-text simulation configuration.
//!
//! ```toml
//! design = "m1"
//! n = 10000
//! reps = 1000
//! seed = 7
//! estimator = "mult-ratio"
//! steps = 2
//!
//! [perturbation]
//! z1_offset = 0.15
//!
//! [overrides]
//! effect = 0.5
//! "coefficients.z2" = 0.3
//! ```
//!
//! Override keys are dotted paths into the design's fields; unknown paths are
//! rejected.

use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use super::design::{ContinuousDesign, LevelDesign, Link, Perturbation, SimDesign};
use super::runner::{EstimatorSpec, Method};
use crate::error::{Result, SmmError};

fn default_seed() -> u64 {
    1
}

fn default_steps() -> u8 {
    2
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub design: String,
    pub n: usize,
    pub reps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub estimator: String,
    #[serde(default = "default_steps")]
    pub steps: u8,
    #[serde(default)]
    pub expanded: bool,
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
    #[serde(default)]
    pub overrides: toml::Table,
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SmmError::Config(e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| SmmError::Io { path: path.into(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn design(&self) -> Result<SimDesign> {
        let mut design = design_by_name(&self.design)?;
        if let Some(p) = self.perturbation {
            design = set_perturbation(design, p)?;
        }
        let overrides = self
            .overrides
            .iter()
            .map(|(k, v)| Ok((k.clone(), serde_json::to_value(v).map_err(|e| SmmError::Config(e.to_string()))?)))
            .collect::<Result<Vec<_>>>()?;
        let design = apply_overrides(&design, &overrides)?;
        design.validate()?;
        Ok(design)
    }

    pub fn estimator(&self) -> Result<EstimatorSpec> {
        EstimatorSpec::new(Method::parse(&self.estimator, self.expanded)?, self.steps)
    }
}

/// Default design for a name accepted on the command line.
pub fn design_by_name(name: &str) -> Result<SimDesign> {
    match name.replace('_', "-").as_str() {
        "m1" => Ok(SimDesign::m1()),
        "m2" => Ok(SimDesign::m2()),
        "probit-late" => Ok(SimDesign::probit_late()),
        "levels" => Ok(SimDesign::Levels(LevelDesign::example(Link::Log, 0.4))),
        "continuous-logistic" => Ok(SimDesign::ContinuousLogistic(ContinuousDesign::default())),
        _ => Err(SmmError::InvalidDesign(format!(
            "unknown design `{name}`; expected m1, m2, probit-late, levels or continuous-logistic"
        ))),
    }
}

fn set_perturbation(design: SimDesign, p: Perturbation) -> Result<SimDesign> {
    match design {
        SimDesign::M1(mut d) => {
            d.perturbation = p;
            Ok(SimDesign::M1(d))
        }
        SimDesign::M2(mut d) => {
            d.perturbation = p;
            Ok(SimDesign::M2(d))
        }
        other if p.is_none() => Ok(other),
        other => Err(SmmError::InvalidDesign(format!("design `{}` has no perturbation settings", other.name()))),
    }
}

/// Replaces fields of `design` addressed by dotted paths.
pub fn apply_overrides(design: &SimDesign, overrides: &[(String, Value)]) -> Result<SimDesign> {
    if overrides.is_empty() {
        return Ok(design.clone());
    }
    let mut tree = serde_json::to_value(design).map_err(|e| SmmError::Config(e.to_string()))?;
    for (path, value) in overrides {
        if path == "kind" {
            return Err(SmmError::InvalidDesign("the design kind cannot be overridden".into()));
        }
        merge(&mut tree, path, path.split('.'), value)?;
    }
    serde_json::from_value(tree).map_err(|e| SmmError::InvalidDesign(format!("override rejected: {e}")))
}

fn merge<'a>(node: &mut Value, full: &str, mut path: impl Iterator<Item = &'a str>, value: &Value) -> Result<()> {
    let Some(key) = path.next() else {
        return replace(node, full, value);
    };
    let slot = node
        .as_object_mut()
        .and_then(|m| m.get_mut(key))
        .ok_or_else(|| SmmError::InvalidDesign(format!("unknown design field `{full}`")))?;
    merge(slot, full, path, value)
}

fn replace(slot: &mut Value, full: &str, value: &Value) -> Result<()> {
    match (slot.as_object_mut(), value.as_object()) {
        (Some(target), Some(src)) => {
            for (k, v) in src {
                let inner = target
                    .get_mut(k)
                    .ok_or_else(|| SmmError::InvalidDesign(format!("unknown design field `{full}.{k}`")))?;
                replace(inner, &format!("{full}.{k}"), v)?;
            }
            Ok(())
        }
        (Some(_), None) => Err(SmmError::InvalidDesign(format!("`{full}` is a table, not a value"))),
        (None, _) => {
            // numbers given as integers still land on float fields
            *slot = match (slot.is_f64(), value.as_i64()) {
                (true, Some(i)) => Value::from(i as f64),
                _ => value.clone(),
            };
            Ok(())
        }
    }
}

/// Parses a `key=value` override; the value is read as a number, boolean or
/// JSON array, falling back to a string.
pub fn parse_assignment(text: &str) -> Result<(String, Value)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| SmmError::InvalidInput(format!("expected key=value, got `{text}`")))?;
    let v = v.trim();
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::design::LinkDesign;

    #[test]
    fn full_config_parses() {
        let cfg = SimConfig::from_toml_str(
            r#"
            design = "m1"
            n = 500
            reps = 3
            seed = 9
            estimator = "mult-ratio"
            steps = 2
            [perturbation]
            z1_offset = 0.15
            [overrides]
            effect = 0.5
            "coefficients.z2" = 0.3
            "#,
        )
        .unwrap();
        let SimDesign::M1(d) = cfg.design().unwrap() else { panic!("expected m1") };
        assert_eq!(d.perturbation.z1_offset, 0.15);
        assert_eq!(d.effect, 0.5);
        assert_eq!(d.coefficients.z2, 0.3);
        assert_eq!(cfg.estimator().unwrap().method.name(), "mult-ratio");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            SimConfig::from_toml_str("design='m1'\nn=1\nreps=1\nestimator='mult'\nbogus=1"),
            Err(SmmError::Config(_))
        ));
        let cfg = SimConfig::from_toml_str("design='m1'\nn=1\nreps=1\nestimator='mult'\n[overrides]\nrho=0.5").unwrap();
        assert!(matches!(cfg.design(), Err(SmmError::InvalidDesign(_))));
    }

    #[test]
    fn perturbation_on_probit_rejected() {
        let cfg = SimConfig::from_toml_str(
            "design='probit-late'\nn=1\nreps=1\nestimator='lrr'\n[perturbation]\nz2_offset=0.1",
        )
        .unwrap();
        assert!(cfg.design().is_err());
    }

    #[test]
    fn overrides_reach_nested_fields_and_lists() {
        let d = apply_overrides(
            &SimDesign::probit_late(),
            &[parse_assignment("correlation=0").unwrap(), parse_assignment("exposure_probs=[0.2,0.3,0.4,0.5]").unwrap()],
        )
        .unwrap();
        let SimDesign::ProbitLate(p) = d else { panic!() };
        assert_eq!(p.correlation, 0.0);
        assert_eq!(p.exposure_probs, vec![0.2, 0.3, 0.4, 0.5]);
        let m = apply_overrides(&SimDesign::m2(), &[parse_assignment("perturbation.z2_offset=0.25").unwrap()]).unwrap();
        assert_eq!(m, {
            let mut d = LinkDesign::m2();
            d.perturbation.z2_offset = 0.25;
            SimDesign::M2(d)
        });
    }

    #[test]
    fn type_mismatch_rejected() {
        assert!(apply_overrides(&SimDesign::m1(), &[parse_assignment("effect=high").unwrap()]).is_err());
        assert!(apply_overrides(&SimDesign::m1(), &[parse_assignment("kind=m2").unwrap()]).is_err());
    }
}
