use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("degenerate pair: points {0} and {1} are closer than the minimum separation")]
    DegeneratePair(usize, usize),

    #[error("degenerate feature: pre-normalisation norm {norm:e} for row {row}")]
    DegenerateFeature { row: usize, norm: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("not enough correspondences: {found} < {needed} after {attempts} attempts")]
    TooFewCorrespondences {
        found: usize,
        needed: usize,
        attempts: usize,
    },

    #[error("non-finite loss at iteration {iteration} (batch seed {batch_seed:#018x})")]
    NonFiniteLoss { iteration: usize, batch_seed: u64 },

    #[error("non-finite gradient at iteration {iteration}: {detail}")]
    NonFiniteGradient { iteration: usize, detail: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
