use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid simplex point: {0}")]
    InvalidPoint(String),

    #[error("invalid payoff matrix: {0}")]
    InvalidPayoff(String),

    #[error("mean fitness {mean_fitness} is not positive")]
    FitnessDegenerate { mean_fitness: f64 },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("scaling regime violation: {0}")]
    Regime(String),

    #[error("ensemble of size {size} exceeds the exact solver cap of {cap}; use w1_sliced")]
    Capacity { size: usize, cap: usize },

    #[error("witness `{name}` is not 1-Lipschitz: ratio {ratio} on a sample pair")]
    InvalidWitness { name: String, ratio: f64 },

    #[error("step rejected below minimum step size at t = {time}: {reason}")]
    Stiffness { time: f64, reason: String },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("quadrature too coarse: {nodes} time nodes (need at least {required})")]
    Resolution { nodes: usize, required: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
