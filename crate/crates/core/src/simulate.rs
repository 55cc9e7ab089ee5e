//! Synthetic functional time series with known kernels, forecast accuracy
//! and the replicated Bayes-factor study.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Max, Min, OrderStatistics};

use crate::error::{Error, Result};
use crate::evidence::{bayes_factor, mhm_log_marginal};
use crate::gibbs::{run_chain, GibbsConfig, PosteriorSample, Sampler};
use crate::grid::{make_grid, trapezoid_weights};
use crate::linalg::{cholesky_jittered, standard_normal_vector};
use crate::model::{assemble_dlm, BasisDims, FunctionalSample, ModelSpec};
use crate::statespace::rolling_forecast_means;

/// One Gaussian bump `w / (π a b) exp(−(τ−c_τ)²/a² − (u−c_u)²/b²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub weight: f64,
    pub center_tau: f64,
    pub center_u: f64,
    pub width_tau: f64,
    pub width_u: f64,
}

impl Bump {
    pub fn eval(&self, tau: f64, u: f64) -> f64 {
        let a = (tau - self.center_tau) / self.width_tau;
        let b = (u - self.center_u) / self.width_u;
        self.weight / (std::f64::consts::PI * self.width_tau * self.width_u) * (-a * a - b * b).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelShape {
    Bimodal([Bump; 2]),
    /// Surface values `[i][j]` at `(τ_i, u_j)` on the simulation grid.
    CustomGrid(Vec<Vec<f64>>),
}

/// A kernel shape plus the squared norm `∫∫Ψ²` it is rescaled to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRecipe {
    pub shape: KernelShape,
    pub target_norm: f64,
}

impl KernelRecipe {
    /// Own-series kernel: bumps at (0.2, 0.3) and (0.7, 0.8).
    pub fn bimodal_a(target_norm: f64) -> Self {
        Self {
            shape: KernelShape::Bimodal([
                Bump {
                    weight: 0.75,
                    center_tau: 0.2,
                    center_u: 0.3,
                    width_tau: 0.3,
                    width_u: 0.4,
                },
                Bump {
                    weight: 0.45,
                    center_tau: 0.7,
                    center_u: 0.8,
                    width_tau: 0.3,
                    width_u: 0.4,
                },
            ]),
            target_norm,
        }
    }

    /// Cross-series kernel: bumps at (0.5, 0.3) and (0.75, 0.6).
    pub fn bimodal_b(target_norm: f64) -> Self {
        Self {
            shape: KernelShape::Bimodal([
                Bump {
                    weight: 0.75,
                    center_tau: 0.5,
                    center_u: 0.3,
                    width_tau: 0.35,
                    width_u: 0.35,
                },
                Bump {
                    weight: 0.45,
                    center_tau: 0.75,
                    center_u: 0.6,
                    width_tau: 0.35,
                    width_u: 0.35,
                },
            ]),
            target_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_norm > 0.0 && self.target_norm < 1.0) {
            return Err(Error::config(
                "simulate",
                "build_kernel",
                format!("target norm {} must lie in (0, 1)", self.target_norm),
            ));
        }
        Ok(())
    }
}

/// `∫∫ f²` by the product trapezoid rule.
pub fn squared_norm(surface: &DMatrix<f64>, tau: &[f64], u: &[f64]) -> f64 {
    let wt = trapezoid_weights(tau);
    let wu = trapezoid_weights(u);
    let mut total = 0.0;
    for (i, a) in wt.iter().enumerate() {
        for (j, b) in wu.iter().enumerate() {
            total += a * b * surface[(i, j)] * surface[(i, j)];
        }
    }
    total
}

/// Kernel surface on `tau × u`, rescaled so that its squared norm equals the
/// recipe's target.
pub fn build_kernel(recipe: &KernelRecipe, tau: &[f64], u: &[f64]) -> Result<DMatrix<f64>> {
    recipe.validate()?;
    let raw = match &recipe.shape {
        KernelShape::Bimodal(bumps) => DMatrix::from_fn(tau.len(), u.len(), |i, j| bumps.iter().map(|b| b.eval(tau[i], u[j])).sum()),
        KernelShape::CustomGrid(values) => {
            if values.len() != tau.len() || values.iter().any(|r| r.len() != u.len()) {
                return Err(Error::shape(
                    "simulate",
                    "build_kernel",
                    format!("custom surface must be {}x{}", tau.len(), u.len()),
                ));
            }
            DMatrix::from_fn(tau.len(), u.len(), |i, j| values[i][j])
        }
    };
    let norm = squared_norm(&raw, tau, u);
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::DegenerateKernel);
    }
    Ok(raw * (recipe.target_norm / norm).sqrt())
}

/// Which series drives which. Series 0 of a generated sample is always the
/// response of the causality test and series 1 the candidate cause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// `Y` follows the bivariate model driven by `X`; `X` is univariate.
    YDependsOnX,
    /// The same construction with the roles of `X` and `Y` exchanged.
    XDependsOnY,
    /// Both series are univariate and independent.
    Independent,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::YDependsOnX => "y-depends-on-x",
            Scenario::XDependsOnY => "x-depends-on-y",
            Scenario::Independent => "independent",
        }
    }

    pub fn is_dependent(self) -> bool {
        self != Scenario::Independent
    }

    /// Names of (response, cause).
    pub fn series_names(self) -> [&'static str; 2] {
        match self {
            Scenario::XDependsOnY => ["x", "y"],
            _ => ["y", "x"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimStudyConfig {
    pub scenarios: Vec<Scenario>,
    /// Number of time points used for fitting.
    pub t_len: usize,
    /// Equispaced observation points per curve on `[0, 1]`.
    pub points: usize,
    pub replicates: usize,
    pub horizons: Vec<usize>,
    /// Measurement noise standard deviation.
    pub noise_sd: f64,
    /// Squared-exponential innovation length-scale and marginal sd.
    pub gp_length: f64,
    pub gp_sd: f64,
    /// Forward steps discarded before recording.
    pub burn_in: usize,
    /// Extra time points after `t_len` used as forecast targets.
    pub holdout: usize,
    pub own_norm: f64,
    pub cross_norm: f64,
    pub gibbs: GibbsConfig,
    /// Posterior draws used for forecasting, evenly thinned.
    pub forecast_draws: usize,
    pub seed: u64,
    /// Worker threads for replicates.
    pub threads: usize,
}

impl Default for SimStudyConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![Scenario::YDependsOnX, Scenario::Independent],
            t_len: 100,
            points: 30,
            replicates: 20,
            horizons: vec![1, 5],
            noise_sd: 0.05,
            gp_length: 0.2,
            gp_sd: 0.2,
            burn_in: 50,
            holdout: 20,
            own_norm: 0.5,
            cross_norm: 0.1,
            gibbs: GibbsConfig {
                iterations: 1500,
                burn_in: Some(500),
                dims: BasisDims {
                    j_mu: Some(6),
                    j_phi: Some(6),
                    j_psi: 5,
                    j_eps: 4,
                },
                ..GibbsConfig::default()
            },
            forecast_draws: 25,
            seed: 1,
            threads: 1,
        }
    }
}

impl SimStudyConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |r: String| Err(Error::config("simulate", "replicate_study", r));
        if self.t_len < 10 {
            return err(format!("T = {} is below 10", self.t_len));
        }
        if self.points < 3 {
            return err(format!("{} points per curve, at least 3 needed", self.points));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return err("horizons must be non-empty and at least 1".into());
        }
        if self.horizons.iter().any(|&h| h > self.holdout) && self.holdout > 0 {
            return err("every horizon must fit inside the holdout".into());
        }
        if self.scenarios.is_empty() {
            return err("no scenarios".into());
        }
        if !(self.noise_sd >= 0.0 && self.gp_sd >= 0.0 && self.gp_length > 0.0) {
            return err("noise and innovation scales must be non-negative".into());
        }
        if self.threads == 0 || self.forecast_draws == 0 {
            return err("threads and forecast_draws must be at least 1".into());
        }
        KernelRecipe::bimodal_a(self.own_norm).validate()?;
        KernelRecipe::bimodal_b(self.cross_norm).validate()?;
        self.gibbs.validate()
    }

    pub fn abscissae(&self) -> Vec<f64> {
        (0..self.points).map(|i| i as f64 / (self.points - 1) as f64).collect()
    }
}

/// A generated sample with the noise-free curves behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub sample: FunctionalSample,
    /// `truth[t][n]`: `μ_n + α^n_t` on the grid.
    pub truth: Vec<Vec<DVector<f64>>>,
    /// `kernels[n][m]`, `None` for absent blocks.
    pub kernels: Vec<Vec<Option<DMatrix<f64>>>>,
}

/// Default mean curves of the response and the cause.
pub fn default_means(tau: &[f64]) -> [DVector<f64>; 2] {
    [
        DVector::from_iterator(tau.len(), tau.iter().map(|t| 0.3 + 0.2 * (2.0 * std::f64::consts::PI * t).sin())),
        DVector::from_iterator(tau.len(), tau.iter().map(|t| -0.2 + 0.3 * t)),
    ]
}

/// Squared-exponential covariance on `tau`.
pub fn gp_covariance(tau: &[f64], sd: f64, length: f64) -> DMatrix<f64> {
    DMatrix::from_fn(tau.len(), tau.len(), |i, j| {
        let d = (tau[i] - tau[j]) / length;
        sd * sd * (-0.5 * d * d).exp()
    })
}

/// Forward simulation of `T + holdout` curves per series after the burn-in.
pub fn generate<R: Rng + ?Sized>(config: &SimStudyConfig, scenario: Scenario, rng: &mut R) -> Result<SimulatedData> {
    let tau = config.abscissae();
    let m = tau.len();
    let w = DVector::from_vec(trapezoid_weights(&tau));
    let own = build_kernel(&KernelRecipe::bimodal_a(config.own_norm), &tau, &tau)?;
    let cross = build_kernel(&KernelRecipe::bimodal_b(config.cross_norm), &tau, &tau)?;
    let kernels = vec![
        vec![Some(own.clone()), scenario.is_dependent().then(|| cross.clone())],
        vec![None, Some(own)],
    ];
    // Transition matrices acting on grid values: Ψ diag(w).
    let ops: Vec<Vec<Option<DMatrix<f64>>>> = kernels
        .iter()
        .map(|row| {
            row.iter()
                .map(|k| {
                    k.as_ref().map(|k| {
                        let mut g = k.clone();
                        for j in 0..m {
                            g.column_mut(j).scale_mut(w[j]);
                        }
                        g
                    })
                })
                .collect()
        })
        .collect();
    let innov = if config.gp_sd > 0.0 {
        Some(
            cholesky_jittered(&gp_covariance(&tau, config.gp_sd, config.gp_length))
                .ok_or_else(|| Error::config("simulate", "generate", "innovation covariance is singular"))?
                .l(),
        )
    } else {
        None
    };
    let means = default_means(&tau);
    let total = config.t_len + config.holdout;
    let mut alpha = [DVector::zeros(m), DVector::zeros(m)];
    let mut truth = Vec::with_capacity(total);
    let mut curves = Vec::with_capacity(total);
    for step in 0..config.burn_in + total {
        let mut next = [DVector::zeros(m), DVector::zeros(m)];
        for (n, out) in next.iter_mut().enumerate() {
            for (c, g) in ops[n].iter().enumerate() {
                if let Some(g) = g {
                    *out += g * &alpha[c];
                }
            }
            if let Some(l) = &innov {
                *out += l * standard_normal_vector(m, rng);
            }
        }
        alpha = next;
        if step >= config.burn_in {
            let clean: Vec<DVector<f64>> = (0..2).map(|n| &means[n] + &alpha[n]).collect();
            curves.push(
                clean
                    .iter()
                    .map(|c| {
                        c.iter()
                            .map(|v| v + config.noise_sd * standard_normal_vector(1, rng)[0])
                            .collect::<Vec<f64>>()
                    })
                    .collect::<Vec<_>>(),
            );
            truth.push(clean);
        }
    }
    let grid = make_grid(&[tau.clone(), tau])?;
    let names = scenario.series_names().iter().map(|s| s.to_string()).collect();
    let sample = FunctionalSample::from_dense(grid, names, &curves)?;
    Ok(SimulatedData { sample, truth, kernels })
}

/// Root mean squared error over grid points and curves.
pub fn rmsfe(truth: &[DVector<f64>], forecasts: &[DVector<f64>]) -> Result<f64> {
    if truth.len() != forecasts.len() || truth.is_empty() || truth.iter().zip(forecasts).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::shape("simulate", "rmsfe", "truth and forecasts differ in shape"));
    }
    let mut ss = 0.0;
    let mut n = 0usize;
    for (a, b) in truth.iter().zip(forecasts) {
        ss += (a - b).norm_squared();
        n += a.len();
    }
    Ok((ss / n as f64).sqrt())
}

/// Posterior predictive means of the response series at every horizon and
/// origin of `future`, averaged over up to `max_draws` evenly spaced draws.
/// Returns `out[h_index][origin]` (response series only).
pub fn response_forecasts(
    sample: &PosteriorSample,
    sampler: &Sampler<'_>,
    future: &FunctionalSample,
    horizons: &[usize],
    max_draws: usize,
) -> Result<Vec<Vec<DVector<f64>>>> {
    if sample.is_empty() {
        return Err(Error::config("simulate", "response_forecasts", "empty posterior sample"));
    }
    let step = sample.len().div_ceil(max_draws).max(1);
    let range = sampler.basis.offsets[0]..sampler.basis.offsets[1];
    let mut acc: Option<Vec<Vec<DVector<f64>>>> = None;
    let mut used = 0.0;
    for d in sample.draws.iter().step_by(step) {
        let dlm = assemble_dlm(&d.state, &sampler.spec, &sampler.basis)?;
        let last = d
            .state
            .alpha
            .last()
            .ok_or_else(|| Error::config("simulate", "response_forecasts", "draw has no latent state"))?;
        let paths = rolling_forecast_means(&dlm, &DVector::from_column_slice(last), future, horizons)?;
        let resp: Vec<Vec<DVector<f64>>> = paths
            .into_iter()
            .map(|row| row.into_iter().map(|c| c.rows(range.start, range.len()).into_owned()).collect())
            .collect();
        match &mut acc {
            None => acc = Some(resp),
            Some(a) => {
                for (ra, rb) in a.iter_mut().zip(resp) {
                    for (x, y) in ra.iter_mut().zip(rb) {
                        *x += y;
                    }
                }
            }
        }
        used += 1.0;
    }
    let mut out = acc.expect("at least one draw");
    for row in out.iter_mut() {
        for c in row.iter_mut() {
            *c /= used;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesRow {
    pub scenario: Scenario,
    pub replicate: usize,
    /// `NaN` when the replicate failed.
    pub ln_bf: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsfeRow {
    pub scenario: Scenario,
    /// `mfar` (unrestricted) or `far` (restricted).
    pub model: String,
    pub horizon: usize,
    pub replicate: usize,
    pub rmsfe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotRow {
    pub scenario: Scenario,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StudyResult {
    pub bayes: Vec<BayesRow>,
    pub rmsfe: Vec<RmsfeRow>,
    pub boxplot: Vec<BoxplotRow>,
}

impl StudyResult {
    pub fn summary(&self, scenario: Scenario) -> Option<&BoxplotRow> {
        self.boxplot.iter().find(|b| b.scenario == scenario)
    }
}

fn quartiles(values: &[f64]) -> Option<(f64, f64, f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut d = Data::new(values.to_vec());
    Some((d.min(), d.lower_quartile(), d.median(), d.upper_quartile(), d.max()))
}

/// Result of one scenario and replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub ln_bf: f64,
    /// `(model, horizon, rmsfe)`.
    pub rmsfe: Vec<(String, usize, f64)>,
}

/// Generate one data set, fit both models, compare evidence and forecasts.
pub fn run_replicate(config: &SimStudyConfig, scenario: Scenario, replicate: usize) -> Result<ReplicateOutcome> {
    let scenario_index = match scenario {
        Scenario::YDependsOnX => 0,
        Scenario::XDependsOnY => 1,
        Scenario::Independent => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream((replicate as u64) * 4 + scenario_index);
    let sim = generate(config, scenario, &mut rng)?;
    let train = sim.sample.slice(0..config.t_len);
    let future = sim.sample.slice(config.t_len..config.t_len + config.holdout);
    let chain_seed: u64 = rng.gen();
    let mut estimates = Vec::new();
    let mut rmsfe_rows = Vec::new();
    for (k, (name, spec)) in [("mfar", ModelSpec::unrestricted()), ("far", ModelSpec::restricted())].into_iter().enumerate() {
        let gibbs = GibbsConfig {
            seed: chain_seed,
            stream: k as u64,
            ..config.gibbs.clone()
        };
        let sampler = Sampler::new(&train, &spec, &gibbs.dims, gibbs.kappa)?;
        let sample = run_chain(&train, &spec, &gibbs)?;
        estimates.push(mhm_log_marginal(&sample, &sampler)?);
        if config.holdout > 0 {
            let fc = response_forecasts(&sample, &sampler, &future, &config.horizons, config.forecast_draws)?;
            for (hi, &h) in config.horizons.iter().enumerate() {
                let truth: Vec<DVector<f64>> = (0..fc[hi].len()).map(|o| sim.truth[config.t_len + o + h - 1][0].clone()).collect();
                rmsfe_rows.push((name.to_string(), h, rmsfe(&truth, &fc[hi])?));
            }
        }
    }
    let report = bayes_factor(&estimates[0], &estimates[1]);
    Ok(ReplicateOutcome {
        ln_bf: report.log_bayes_factor,
        rmsfe: rmsfe_rows,
    })
}

/// Every scenario and replicate of the study; failures are recorded per
/// replicate and do not stop the study.
pub fn replicate_study(config: &SimStudyConfig) -> Result<StudyResult> {
    config.validate()?;
    let tasks: Vec<(Scenario, usize)> = config
        .scenarios
        .iter()
        .flat_map(|&s| (0..config.replicates).map(move |r| (s, r)))
        .collect();
    let mut outcomes: Vec<Option<Result<ReplicateOutcome>>> = (0..tasks.len()).map(|_| None).collect();
    let threads = config.threads.min(tasks.len()).max(1);
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<usize>> = (0..threads).map(|w| (w..tasks.len()).step_by(threads).collect()).collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|idx| {
                let tasks = &tasks;
                scope.spawn(move || {
                    idx.into_iter()
                        .map(|i| {
                            let (s, r) = tasks[i];
                            log::info!("simulate::replicate_study: {} replicate {}", s.name(), r);
                            (i, run_replicate(config, s, r))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, res) in h.join().expect("replicate worker panicked") {
                outcomes[i] = Some(res);
            }
        }
    });
    let mut result = StudyResult::default();
    for ((scenario, replicate), outcome) in tasks.iter().copied().zip(outcomes) {
        match outcome.expect("every task ran") {
            Ok(o) => {
                result.bayes.push(BayesRow {
                    scenario,
                    replicate,
                    ln_bf: o.ln_bf,
                    error: None,
                });
                for (model, horizon, v) in o.rmsfe {
                    result.rmsfe.push(RmsfeRow {
                        scenario,
                        model,
                        horizon,
                        replicate,
                        rmsfe: v,
                    });
                }
            }
            Err(e) => {
                log::warn!("simulate::replicate_study: {} replicate {replicate} failed: {e}", scenario.name());
                result.bayes.push(BayesRow {
                    scenario,
                    replicate,
                    ln_bf: f64::NAN,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    for &scenario in &config.scenarios {
        let values: Vec<f64> = result
            .bayes
            .iter()
            .filter(|b| b.scenario == scenario && b.ln_bf.is_finite())
            .map(|b| b.ln_bf)
            .collect();
        if let Some((min, q1, median, q3, max)) = quartiles(&values) {
            result.boxplot.push(BoxplotRow {
                scenario,
                count: values.len(),
                min,
                q1,
                median,
                q3,
                max,
            });
        }
    }
    Ok(result)
}
