//! Marginal likelihood by the modified harmonic mean, Bayes factors and their
//! interpretation.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::dist::{exp_int_e1, gamma_ln_pdf, gamma_ur, log_integrate_1d, normal_ln_pdf};
use crate::error::{Error, Result};
use crate::gibbs::{factor_chain_prior, PosteriorSample, Sampler, KERNEL_SCALE_PRIOR_VAR, SMOOTHING_FLOOR, SMOOTHING_SD_UPPER, VAGUE_GAMMA};
use crate::linalg::{cholesky_jittered, log_det_chol, log_sum_exp};
use crate::model::{theta_pack, CurveBasis, ParameterState, FLAT_PRIOR_VARIANCE};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Gaussian mass kept inside the truncation ellipsoid.
pub const TRUNCATION_LEVEL: f64 = 0.95;
/// Fewer draws than this inside the truncation region triggers a warning.
pub const MIN_DRAWS_IN_REGION: usize = 10;

/// Multivariate normal, optionally truncated to the ellipsoid holding a given
/// fraction of its mass.
#[derive(Debug, Clone)]
pub struct TruncatedNormal {
    pub mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    /// Squared Mahalanobis radius of the region; `None` for the whole space.
    pub radius2: Option<f64>,
    /// Gaussian mass of the region.
    pub mass: f64,
    log_norm: f64,
}

impl TruncatedNormal {
    /// `level` is the mass of the truncation ellipsoid, or `None` for no
    /// truncation. A ridge of `10^{-8} tr(V)/d` is added to `cov`.
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>, level: Option<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::EvidenceFailure {
                op: "truncated_normal_logpdf",
                reason: format!("mean has length {d}, covariance is {}x{}", cov.nrows(), cov.ncols()),
            });
        }
        let mut v = cov.clone();
        let ridge = 1e-8 * v.trace() / d as f64;
        for i in 0..d {
            v[(i, i)] += ridge;
        }
        let chol = cholesky_jittered(&v).ok_or(Error::EvidenceFailure {
            op: "truncated_normal_logpdf",
            reason: "covariance is singular after ridge regularization".into(),
        })?;
        let (radius2, mass) = match level {
            Some(p) => {
                let chi = ChiSquared::new(d as f64).expect("positive degrees of freedom");
                (Some(chi.inverse_cdf(p)), p)
            }
            None => (None, 1.0),
        };
        let log_norm = -0.5 * d as f64 * LN_2PI - 0.5 * log_det_chol(&chol) - mass.ln();
        Ok(Self {
            mean,
            chol,
            radius2,
            mass,
            log_norm,
        })
    }

    pub fn mahalanobis2(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        self.chol
            .l_dirty()
            .solve_lower_triangular(&d)
            .map_or(f64::INFINITY, |w| w.norm_squared())
    }

    /// Log-density; `−∞` outside the region.
    pub fn ln_pdf(&self, x: &DVector<f64>) -> f64 {
        let q = self.mahalanobis2(x);
        match self.radius2 {
            Some(r2) if q > r2 => f64::NEG_INFINITY,
            _ => self.log_norm - 0.5 * q,
        }
    }
}

pub fn truncated_normal_logpdf(theta: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>, level: Option<f64>) -> Result<f64> {
    Ok(TruncatedNormal::new(mean.clone(), cov, level)?.ln_pdf(theta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhmDiagnostics {
    pub draws: usize,
    pub dim: usize,
    pub in_region: usize,
    pub acceptance: f64,
    /// Effective number of draws carrying the estimator (`(Σw)² / Σw²`).
    pub effective_draws: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhmEstimate {
    pub log_marginal: f64,
    pub diagnostics: MhmDiagnostics,
}

fn sample_moments(thetas: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let s = thetas.len() as f64;
    let d = thetas[0].len();
    let mut mean = DVector::zeros(d);
    for t in thetas {
        mean += t;
    }
    mean /= s;
    let mut cov = DMatrix::zeros(d, d);
    for t in thetas {
        let c = t - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (s - 1.0).max(1.0);
    (mean, cov)
}

/// Modified harmonic mean from per-draw parameter vectors, log-likelihoods and
/// log prior densities:
/// `log p(y) = −log( S^{-1} Σ h(Θ_i) / (L(Θ_i) p(Θ_i)) )`, where `h` is the
/// normal with the sample moments truncated to its 95% ellipsoid.
pub fn mhm_from_terms(thetas: &[DVector<f64>], log_lik: &[f64], log_prior: &[f64]) -> Result<MhmEstimate> {
    let fail = |reason: String| Error::EvidenceFailure {
        op: "mhm_log_marginal",
        reason,
    };
    let s = thetas.len();
    if s < 2 || log_lik.len() != s || log_prior.len() != s {
        return Err(fail(format!(
            "need at least 2 draws with matching terms, got {s}, {}, {}",
            log_lik.len(),
            log_prior.len()
        )));
    }
    if let Some(i) = (0..s).find(|&i| !(log_lik[i].is_finite() && log_prior[i].is_finite())) {
        return Err(fail(format!("draw {i} has a non-finite log-likelihood or log prior")));
    }
    let (mean, cov) = sample_moments(thetas);
    let h = TruncatedNormal::new(mean, &cov, Some(TRUNCATION_LEVEL))?;
    let terms: Vec<f64> = thetas
        .iter()
        .zip(log_lik.iter().zip(log_prior))
        .map(|(t, (ll, lp))| h.ln_pdf(t) - ll - lp)
        .filter(|v| v.is_finite())
        .collect();
    if terms.is_empty() {
        return Err(fail("no draw falls inside the truncation region".into()));
    }
    let mut warnings = Vec::new();
    if terms.len() < MIN_DRAWS_IN_REGION {
        let msg = format!("only {} of {s} draws fall inside the truncation region", terms.len());
        log::warn!("evidence::mhm_log_marginal: {msg}");
        warnings.push(msg);
    }
    let lse = log_sum_exp(&terms);
    let sq: Vec<f64> = terms.iter().map(|t| 2.0 * t).collect();
    let effective_draws = (2.0 * lse - log_sum_exp(&sq)).exp();
    Ok(MhmEstimate {
        log_marginal: (s as f64).ln() - lse,
        diagnostics: MhmDiagnostics {
            draws: s,
            dim: thetas[0].len(),
            in_region: terms.len(),
            acceptance: terms.len() as f64 / s as f64,
            effective_draws,
            warnings,
        },
    })
}

/// Log marginal likelihood of the model a chain was run under.
pub fn mhm_log_marginal(sample: &PosteriorSample, sampler: &Sampler<'_>) -> Result<MhmEstimate> {
    let thetas: Vec<DVector<f64>> = sample
        .draws
        .iter()
        .map(|d| DVector::from_vec(theta_pack(&d.state, &sampler.basis, &sampler.spec)))
        .collect();
    let ll: Vec<f64> = sample.draws.iter().map(|d| d.loglik).collect();
    let lp: Vec<f64> = sample.draws.iter().map(|d| theta_log_prior(&d.state, sampler)).collect();
    mhm_from_terms(&thetas, &ll, &lp)
}

/// `log ∫ λ^{p/2} e^{−λ ss/2} π(λ) dλ` for the smoothing prior `π` induced by
/// `λ^{-1/2} ~ Uniform(0, 10^4)`.
fn ln_smoothing_marginal(p: usize, ss: f64) -> f64 {
    let a = 0.5 * (p as f64 - 1.0);
    let b = (0.5 * ss).max(f64::MIN_POSITIVE);
    let x = SMOOTHING_FLOOR * b;
    let ln_c = (0.5 / SMOOTHING_SD_UPPER).ln();
    if a == 0.0 {
        return ln_c + exp_int_e1(x).ln();
    }
    let q = gamma_ur(a, x);
    let ln_q = if q > 0.0 {
        q.ln()
    } else {
        // Leading term of the asymptotic expansion for large x.
        (a - 1.0) * x.ln() - x - ln_gamma(a)
    };
    ln_c + ln_gamma(a) - a * b.ln() + ln_q
}

fn split_ss(cb: &CurveBasis, coeffs: &[f64]) -> (f64, f64) {
    let u: f64 = coeffs[..cb.unpenalized].iter().map(|v| v * v).sum();
    let p: f64 = coeffs[cb.unpenalized..].iter().map(|v| v * v).sum();
    (u, p)
}

/// Log prior of mean coefficients with the smoothing parameter integrated out.
fn mean_log_prior(cb: &CurveBasis, theta: &[f64]) -> f64 {
    let mut total: f64 = theta[..cb.unpenalized].iter().map(|&v| normal_ln_pdf(v, 0.0, FLAT_PRIOR_VARIANCE)).sum();
    let p = cb.penalized();
    if p > 0 {
        let (_, ss) = split_ss(cb, theta);
        total += -0.5 * p as f64 * LN_2PI + ln_smoothing_marginal(p, ss);
    }
    total
}

/// Log-density of a precision in log coordinates under `Gamma(10^{-3}, 10^{-3})`.
fn log_precision_prior(prec: f64) -> f64 {
    gamma_ln_pdf(prec, VAGUE_GAMMA, VAGUE_GAMMA) + prec.ln()
}

/// Log prior of the loading columns with their shared smoothing parameter
/// integrated out.
fn loading_log_prior(cb: &CurveBasis, xi: &[f64], j_eps: usize) -> f64 {
    let j_phi = cb.dim();
    let mut total = 0.0;
    let mut ss = 0.0;
    for col in xi.chunks(j_phi).take(j_eps) {
        total += col[..cb.unpenalized].iter().map(|&v| normal_ln_pdf(v, 0.0, FLAT_PRIOR_VARIANCE)).sum::<f64>();
        ss += split_ss(cb, col).1;
    }
    let p = cb.penalized() * j_eps;
    if p > 0 {
        total += -0.5 * p as f64 * LN_2PI + ln_smoothing_marginal(p, ss);
    }
    total
}

/// `log cosh(y)` without overflow.
fn ln_cosh(y: f64) -> f64 {
    let a = y.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Log prior of kernel coefficients with `λ_Ψ = λ̃ / ξ̃²` integrated out.
/// With `λ̃ ~ Gamma(1/2, 1/2)` and `ξ̃ ~ N(0, 10^6)`, `10^6 λ_Ψ ~ F(1, 1)`, so
/// `z = ln λ_Ψ` has density `1 / (2π cosh((z + ln 10^6)/2))`.
fn kernel_log_prior(theta: &[f64], omega: &DMatrix<f64>, omega_logdet: f64) -> f64 {
    let th = DVector::from_column_slice(theta);
    let q = th.dot(&(omega * &th));
    let d = theta.len() as f64;
    let c = KERNEL_SCALE_PRIOR_VAR.ln();
    let f = |z: f64| {
        0.5 * d * (z - LN_2PI) + 0.5 * omega_logdet - 0.5 * z.exp() * q - (2.0 * std::f64::consts::PI).ln() - ln_cosh(0.5 * (z + c))
    };
    log_integrate_1d(f, -80.0, 80.0, 800)
}

/// Log prior density of the marginal-likelihood parameter vector (see
/// [`crate::model::ThetaLayout`]) with the smoothing parameters and kernel
/// expansion variables integrated out.
pub fn theta_log_prior(state: &ParameterState, sampler: &Sampler<'_>) -> f64 {
    let mut total = 0.0;
    for (n, s) in sampler.basis.series.iter().enumerate() {
        total += mean_log_prior(&s.mean, &state.mean[n].theta_mu);
        total += log_precision_prior(1.0 / state.sigma2_nu[n]);
        let p = &state.innovation[n];
        total += loading_log_prior(&s.loading, &p.xi, p.j_eps);
        // Sign normalization folds each column onto a half-space.
        total += p.j_eps as f64 * std::f64::consts::LN_2;
        // Ordered chain in log-precision coordinates.
        total += factor_chain_prior(&p.sigma2_factor) - p.sigma2_factor.iter().map(|v| v.ln()).sum::<f64>();
        total += log_precision_prior(1.0 / p.sigma2_eta);
    }
    for (i, b) in state.kernel.blocks.iter().enumerate() {
        total += kernel_log_prior(&b.theta_psi, sampler.omega(i), sampler.omega_logdet(i));
    }
    total
}

/// Interpretation of `ln B` for the unrestricted model against the restricted
/// one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    FavorsRestricted,
    NotWorthMention,
    Substantial,
    Strong,
    Decisive,
}

impl Category {
    /// Half-open bands `[0, 1)`, `[1, 3)`, `[3, 5)` and `[5, ∞)` on `ln B`.
    pub fn from_log_bayes_factor(ln_b: f64) -> Self {
        if ln_b < 0.0 {
            Category::FavorsRestricted
        } else if ln_b < 1.0 {
            Category::NotWorthMention
        } else if ln_b < 3.0 {
            Category::Substantial
        } else if ln_b < 5.0 {
            Category::Strong
        } else {
            Category::Decisive
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::FavorsRestricted => "favors restricted model",
            Category::NotWorthMention => "not worth more than a bare mention",
            Category::Substantial => "substantial",
            Category::Strong => "strong",
            Category::Decisive => "decisive",
        }
    }
}

/// Largest finite value reported for the linear-scale Bayes factor.
pub const BAYES_FACTOR_CAP: f64 = 1e308;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub log_marginal_unrestricted: f64,
    pub log_marginal_restricted: f64,
    pub log_bayes_factor: f64,
    /// Saturates at [`BAYES_FACTOR_CAP`]; the log is authoritative.
    pub bayes_factor: f64,
    pub category: Category,
    pub diagnostics_unrestricted: MhmDiagnostics,
    pub diagnostics_restricted: MhmDiagnostics,
}

pub fn bayes_factor(unrestricted: &MhmEstimate, restricted: &MhmEstimate) -> EvidenceReport {
    let ln_b = unrestricted.log_marginal - restricted.log_marginal;
    EvidenceReport {
        log_marginal_unrestricted: unrestricted.log_marginal,
        log_marginal_restricted: restricted.log_marginal,
        log_bayes_factor: ln_b,
        bayes_factor: ln_b.exp().min(BAYES_FACTOR_CAP),
        category: Category::from_log_bayes_factor(ln_b),
        diagnostics_unrestricted: unrestricted.diagnostics.clone(),
        diagnostics_restricted: restricted.diagnostics.clone(),
    }
}
