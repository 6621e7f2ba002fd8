use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("covariance is not numerically positive definite (pivot {pivot} = {value:e})")]
    CholeskyFailure { pivot: usize, value: f64 },

    #[error("time {k} is outside the declared horizon {horizon}")]
    OutOfRange { k: usize, horizon: usize },

    #[error("window [{start}, {end}) overruns dataset horizon {horizon}")]
    WindowOverrun { start: usize, end: usize, horizon: usize },

    #[error("requested {requested} trajectories but the dataset holds {available}")]
    InsufficientTrajectories { requested: usize, available: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error in {path}: {msg}")]
    Schema { path: PathBuf, msg: String },

    #[error("Riccati iteration did not converge (residual {residual:e} after {iterations} iterations)")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("(A, B) is not controllable (controllability rank {rank} < {n})")]
    NotControllable { rank: usize, n: usize },

    #[error("explicit affine error form requires a linear tube controller")]
    NotLinear,

    #[error("input tightening is empty in component {index}: [{lower}, {upper}]")]
    EmptyTightening { index: usize, lower: f64, upper: f64 },

    #[error("terminal equality is unreachable from the current nominal state")]
    InfeasibleHardTerminal,

    #[error("MPC problem not solved: {0:?}")]
    NotSolved(crate::qp::QpStatus),

    #[error("terminal set has no terminal policy")]
    NoTerminalPolicy,

    #[error("run {run}, step {step}: {source}")]
    Step {
        run: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Schema { path: path.into(), msg: msg.into() }
    }

    /// Strips run/step wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }
}
