use thiserror::Error;

/// Errors raised by the estimation pipeline. Every message names the module
/// and operation it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid::make_grid: series {series} has {count} points, at least 3 are required")]
    GridTooSmall { series: usize, count: usize },

    #[error("grid::make_grid: series {series}: {reason}")]
    InvalidGrid { series: usize, reason: String },

    #[error("grid::incidence: abscissa {point} does not match any grid point within {tolerance:e}")]
    PointNotOnGrid { point: f64, tolerance: f64 },

    #[error("grid::{op}: basis order {order} invalid for {points} grid points ({reason})")]
    BadBasisOrder {
        op: &'static str,
        order: usize,
        points: usize,
        reason: &'static str,
    },

    #[error("{module}::{op}: shape mismatch: {detail}")]
    Shape {
        module: &'static str,
        op: &'static str,
        detail: String,
    },

    #[error("statespace::{op}: covariance not positive definite at t = {t}")]
    NumericalBreakdown { op: &'static str, t: usize },

    #[error("gibbs::initialize: {0}")]
    InitFailure(String),

    #[error("gibbs::sweep: conditional for `{component}` is not positive definite")]
    SweepFailure { component: &'static str },

    #[error("gibbs::run_chain: iteration {iteration}: {source}")]
    ChainFailure {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("evidence::{op}: {reason}")]
    EvidenceFailure { op: &'static str, reason: String },

    #[error("simulate::build_kernel: kernel surface has zero norm before rescaling")]
    DegenerateKernel,

    #[error("{module}::{op}: invalid configuration: {reason}")]
    Config {
        module: &'static str,
        op: &'static str,
        reason: String,
    },

    #[error("model::serialize: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(module: &'static str, op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            module,
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(module: &'static str, op: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            module,
            op,
            reason: reason.into(),
        }
    }
}
