use thiserror::Error;

/// Errors surfaced by the simulation and verification kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence must be nonempty")]
    EmptySequence,

    #[error("invalid tail vector: {0}")]
    InvalidTail(&'static str),

    #[error("invalid empirical tail: {0}")]
    InvalidEmpirical(&'static str),

    #[error("index ranges do not match: sequence covers 0..={seq}, weights cover 1..={weights}")]
    LengthMismatch { seq: usize, weights: usize },

    #[error("weight ratio theta = {0} outside (0, 1]")]
    ThetaOutOfRange(f64),

    #[error("weights violate the comparison condition at k = {k}")]
    WeightComparison { k: usize },

    #[error("invalid model parameters: {0}")]
    InvalidParams(&'static str),

    #[error("unstable regime: rho = {rho} >= 1, no fixed point exists")]
    UnstableRegime { rho: f64 },

    #[error("population too small: N = {n} < L = {l}")]
    PopulationTooSmall { n: u64, l: u32 },

    #[error("step size must be positive, got {0}")]
    NonPositiveStep(f64),

    #[error("ODE step rejected at t = {t}: coordinate {k} reached {value} (reduce dt)")]
    StepRejected { t: f64, k: usize, value: f64 },

    #[error("time {requested} outside the available horizon [0, {available}]")]
    HorizonExceeded { requested: f64, available: f64 },

    #[error("invalid fluctuation state: {0}")]
    InvalidState(&'static str),

    #[error("fluctuation block 1..={block} exceeds the state horizon {k_max}")]
    BlockExceedsHorizon { block: usize, k_max: usize },

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },

    #[error("degenerate sigma: standard deviation must be positive")]
    DegenerateSigma,

    #[error("covariance matrix is not positive semidefinite: min eigenvalue {0}")]
    NotPositiveSemidefinite(f64),

    #[error("covariance matrix is not symmetric")]
    NotSymmetric,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
