use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("state has zero total mass")]
    ZeroMass,

    #[error("invalid state entry ({i}, {j}): {reason}")]
    InvalidEntry { i: usize, j: usize, reason: String },

    #[error("cannot parse policy selector `{selector}`: {reason}")]
    PolicyParse { selector: String, reason: String },

    #[error("fluid mass {mass:e} reached truncation column {jmax} at t = {t}; raise --jmax")]
    JmaxOverflow { t: f64, jmax: usize, mass: f64 },

    #[error("no arrival observed after warmup {warmup} within horizon {horizon}")]
    NoPostWarmupArrivals { warmup: f64, horizon: f64 },

    #[error("truncated chain has {states} states, budget is {budget}")]
    StateSpaceOverflow { states: usize, budget: usize },

    #[error("chain is reducible: {closed} closed classes with sizes {sizes:?}")]
    ReducibleChain { closed: usize, sizes: Vec<usize> },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("fixed point residual {residual:e} exceeds {tolerance:e}")]
    FixedPointResidual { residual: f64, tolerance: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn params(msg: impl Into<String>) -> Self {
        Error::InvalidParams(msg.into())
    }
}
