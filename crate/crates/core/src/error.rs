use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SmmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SmmError {
    #[error("{what}: value {value} outside the admissible domain")]
    Domain { what: &'static str, value: f64 },

    #[error("matrix is singular or ill-conditioned (condition estimate {condition:.3e})")]
    SingularMatrix { condition: f64 },

    #[error("weight matrix is singular; moment {index} carries no independent variation (condition estimate {condition:.3e})")]
    SingularWeight { index: usize, condition: f64 },

    #[error("non-finite value while evaluating {what}")]
    NonFinite { what: &'static str },

    #[error("exp overflow: |x * psi| = {value:.1} exceeds 700; center or rescale the exposure")]
    Overflow { value: f64 },

    #[error("logistic fit diverged: coefficient {index} reached {value:.2} (complete or quasi-complete separation)")]
    Separation { index: usize, value: f64 },

    #[error("regressor matrix is rank deficient")]
    RankDeficient,

    #[error("association model cannot be saturated: no observations with X = {x}, Z level {level}")]
    SaturationFailure { x: u8, level: usize },

    #[error("degenerate instrument: {0}")]
    DegenerateInstrument(String),

    #[error("degenerate increment between instrument levels {lower} and {upper}: {what} does not change")]
    DegenerateIncrement { lower: usize, upper: usize, what: &'static str },

    #[error("model is just identified; the J test needs over-identifying restrictions")]
    NotOverIdentified,

    #[error("optimizer did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("column `{0}` not found in header")]
    ColumnNotFound(String),

    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    Parse { row: usize, column: String, value: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(String),
}
