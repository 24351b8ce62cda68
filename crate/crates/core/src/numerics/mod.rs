//! Distributions, RNG streams, linear algebra and small solvers.

pub mod diff;
pub mod dist;
pub mod linalg;
pub mod logistic;
pub mod rng;

pub use diff::finite_diff_jacobian;
pub use dist::{
    bivariate_normal_cdf, chisq_survival, expit, logit, normal_cdf, normal_pdf, normal_quantile,
};
pub use linalg::{solve_linear, Factorized, SquareMatrix};
pub use logistic::{logistic_mle, LogisticFit};
pub use rng::RngStream;
