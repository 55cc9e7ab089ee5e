//! Bayesian multivariate functional autoregression with Granger-causality
//! testing by Bayes factors.
//!
//! Curves of `K` series observed on (possibly irregular) grids follow a lag-1
//! functional autoregression. Kernels, mean curves and a factor model for the
//! innovations are estimated by a Gibbs sampler over the equivalent dynamic
//! linear model. Whether series 1 helps predict series 0 is decided by
//! comparing the marginal likelihoods of the unrestricted and restricted
//! models, each estimated by a modified harmonic mean.
//!
//! - [`grid`]: evaluation grids, quadrature, incidence maps, spline bases.
//! - [`model`]: data containers, parameter state, state-space assembly.
//! - [`statespace`]: Kalman filter, joint state sampling, forecasting.
//! - [`gibbs`]: initialization, full conditionals, chains and checkpoints.
//! - [`evidence`]: marginal likelihoods, Bayes factors and their categories.
//! - [`simulate`]: synthetic data and the replicate study.

pub mod dist;
pub mod error;
pub mod evidence;
pub mod gibbs;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod simulate;
pub mod statespace;

pub use error::{Error, Result};
pub use evidence::{bayes_factor, mhm_log_marginal, Category, EvidenceReport, MhmDiagnostics, MhmEstimate};
pub use gibbs::{run_chain, Chain, Checkpoint, GibbsConfig, PosteriorSample, Sampler};
pub use grid::{make_grid, EvaluationGrid, GridKind, SeriesGrid};
pub use model::{BasisDims, FunctionalSample, Hypothesis, ModelSpec, ParameterState};
pub use simulate::{replicate_study, Scenario, SimStudyConfig, StudyResult};
