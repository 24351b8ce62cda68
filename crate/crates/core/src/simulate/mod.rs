//! Simulation designs and the Monte Carlo replication runner.

mod config;
mod design;
mod runner;

pub use config::{apply_overrides, design_by_name, parse_assignment, SimConfig};
pub use design::{
    probit_level_moments, probit_population_quantities, Coefficients, ContinuousDesign, LevelDesign, Link,
    LinkDesign, Perturbation, ProbitDesign, SimDesign, CMI_TOL,
};
pub use runner::{run_replications, EstimatorSpec, JSummary, McSummary, Method, ParamSummary, UNRELIABLE_SHARE};
