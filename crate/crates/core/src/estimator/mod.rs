//! GMM estimation of the structural mean models.

mod combination;
mod gmm;
mod tsls;
mod two_stage;

pub use combination::{efficient_combination, EfficientCombination, LevelVariance};
pub use gmm::{
    check_exposure_relevance, check_saturation, default_start, fit_gmm, fit_model, fit_one_step, fit_one_step_with,
    fit_two_step, fit_two_step_with, gmm_objective, hansen_j, minimize, GmmFit, GmmOptions, JTest, Minimum, Z_975,
};
pub use tsls::{fit_2sls_additive, tsls_general};
pub use two_stage::{association_fit, corrected_omega, fit_2sgmm_logistic, fit_logistic_plugin, PLUGIN_SE_NOTE};

#[cfg(test)]
mod tests;
