pub mod data;
pub mod error;
pub mod estimator;
pub mod late;
pub mod moments;
pub mod numerics;
pub mod report;
pub mod simulate;

#[cfg(test)]
mod testutil;

pub use data::{Dataset, Encoding, EstimationData, InstrumentSpec};
pub use error::{Result, SmmError};
pub use moments::{ModelKind, MomentModel, Theta};
