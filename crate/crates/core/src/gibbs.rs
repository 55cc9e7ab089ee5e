//! Posterior sampling: initialization, the full-conditional sweep and chain
//! bookkeeping.
//!
//! One sweep updates, in order: the kernel coefficients with their expansion
//! scale and smoothing, the innovation factor model (factors, factor
//! precisions, approximation-error precision, loading curves, a rescaling of
//! each loading column against its factor, and the loading smoothing), the measurement precisions, a joint Metropolis move on the
//! measurement and nugget variances with the latent states integrated out,
//! the latent states in one joint draw, and the mean curves with their
//! smoothing. The kernel and state updates integrate the factors out, which
//! is why the factors are redrawn right after the kernel step.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{gamma_ln_pdf, normal_ln_pdf, TruncatedGamma};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, log_det_chol, GaussianConditional};
use crate::model::{
    assemble_dlm, block_transition, coefficient_matrix, BasisDims, CurveBasis, FunctionalSample, InnovationParams,
    KernelBlock, KernelParams, MeanParams, ModelBasis, ModelSpec, ParameterState, FLAT_PRIOR_VARIANCE,
};
use crate::statespace;

/// Shape and rate of the vague Gamma priors on precisions.
pub const VAGUE_GAMMA: f64 = 1e-3;
/// Prior variance of the kernel expansion scale `ξ̃_Ψ`.
pub const KERNEL_SCALE_PRIOR_VAR: f64 = 1e6;
/// Upper end of the uniform prior on `λ^{-1/2}` for curve smoothing
/// parameters; equivalently `λ ≥ 10^{-8}`.
pub const SMOOTHING_SD_UPPER: f64 = 1e4;
pub const SMOOTHING_FLOOR: f64 = 1.0 / (SMOOTHING_SD_UPPER * SMOOTHING_SD_UPPER);
/// Prior variance of `log κ`.
pub const LOG_KAPPA_PRIOR_VAR: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GibbsConfig {
    pub iterations: usize,
    /// Defaults to half of `iterations`.
    pub burn_in: Option<usize>,
    pub thin: usize,
    pub seed: u64,
    /// RNG stream; chains run side by side must use different streams.
    pub stream: u64,
    pub dims: BasisDims,
    /// Roughness mixing weight `κ`, held fixed.
    pub kappa: f64,
    /// Keep every latent state in the stored draws instead of only the last.
    pub keep_full_latent: bool,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            burn_in: None,
            thin: 1,
            seed: 1,
            stream: 0,
            dims: BasisDims::default(),
            kappa: 1.0,
            keep_full_latent: false,
        }
    }
}

impl GibbsConfig {
    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.iterations / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |r: &str| Err(Error::config("gibbs", "run_chain", r));
        if self.iterations == 0 || self.burn_in() >= self.iterations {
            return err("need iterations > burn_in >= 0");
        }
        if self.thin == 0 {
            return err("thin must be at least 1");
        }
        if self.dims.j_eps == 0 {
            return err("J_eps must be at least 1");
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return err("kappa must be positive");
        }
        Ok(())
    }

    pub fn expected_draws(&self) -> usize {
        (self.iterations - self.burn_in()).div_ceil(self.thin)
    }
}

/// One stored posterior draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub iteration: usize,
    pub state: ParameterState,
    /// `log p(y | Θ)` with latent states integrated out.
    pub loglik: f64,
    pub log_prior: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub draws: Vec<Draw>,
}

impl PosteriorSample {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Everything fixed during a chain: data, bases, block penalties and
/// observation summaries.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    pub data: &'a FunctionalSample,
    pub basis: ModelBasis,
    pub spec: ModelSpec,
    pub kappa: f64,
    /// `Ω_Ψ = Ω_2 + κ Ω_0` for each active block, in block order.
    omegas: Vec<DMatrix<f64>>,
    omega_logdets: Vec<f64>,
    /// Number of observations per grid point, per series.
    counts: Vec<DVector<f64>>,
    total_obs: Vec<f64>,
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a FunctionalSample, spec: &ModelSpec, dims: &BasisDims, kappa: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InitFailure("no observations".into()));
        }
        if spec.series_count != data.series_count() {
            return Err(Error::config(
                "gibbs",
                "initialize",
                format!("spec has {} series, data {}", spec.series_count, data.series_count()),
            ));
        }
        let basis = ModelBasis::new(&data.grid, dims)?;
        let mut omegas = Vec::new();
        let mut omega_logdets = Vec::new();
        for (r, c) in spec.active_blocks() {
            let om = basis.penalty(r, c).combined(kappa);
            let chol = cholesky_jittered(&om).ok_or(Error::InitFailure(format!("kernel penalty ({r}, {c}) is singular")))?;
            omega_logdets.push(log_det_chol(&chol));
            omegas.push(om);
        }
        let k = data.series_count();
        let mut counts: Vec<DVector<f64>> = (0..k).map(|n| DVector::zeros(basis.series[n].grid_len())).collect();
        for row in &data.observations {
            for (n, obs) in row.iter().enumerate() {
                for &c in &obs.incidence.columns {
                    counts[n][c] += 1.0;
                }
            }
        }
        let total_obs = counts.iter().map(|c| c.sum()).collect();
        Ok(Self {
            data,
            basis,
            spec: spec.clone(),
            kappa,
            omegas,
            omega_logdets,
            counts,
            total_obs,
        })
    }

    pub fn omega(&self, block: usize) -> &DMatrix<f64> {
        &self.omegas[block]
    }

    pub fn omega_logdet(&self, block: usize) -> f64 {
        self.omega_logdets[block]
    }

    /// `α^n_t` for `t = 1..T` as the columns of an `M_n × T` matrix.
    pub fn series_alpha(&self, state: &ParameterState, n: usize) -> DMatrix<f64> {
        let off = self.basis.offsets[n];
        let m = self.basis.series[n].grid_len();
        DMatrix::from_fn(m, state.alpha.len(), |i, t| state.alpha[t][off + i])
    }

    /// Kernel-axis projections `z^m_t = B_m' diag(w_m) α^m_t`, `J_m × T`.
    fn projections(&self, alpha: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        self.basis
            .series
            .iter()
            .zip(alpha)
            .map(|(s, a)| {
                let mut bw = s.kernel.evaluation.transpose();
                for j in 0..bw.ncols() {
                    bw.column_mut(j).scale_mut(s.weights[j]);
                }
                bw * a
            })
            .collect()
    }

    /// Innovations `ε^n_t = α^n_t − Σ_m G_nm α^m_{t−1}` (with `ε_1 = α_1`).
    pub fn innovations(&self, state: &ParameterState) -> Result<Vec<DMatrix<f64>>> {
        let alpha: Vec<DMatrix<f64>> = (0..self.basis.series_count()).map(|n| self.series_alpha(state, n)).collect();
        let mut eps = alpha.clone();
        let t_len = state.alpha.len();
        for b in &state.kernel.blocks {
            let g = block_transition(b, &self.basis)?;
            let prev = alpha[b.col].columns(0, t_len - 1);
            let pred = &g * prev;
            let mut target = eps[b.row].columns_mut(1, t_len - 1);
            target -= pred;
        }
        Ok(eps)
    }

    fn state_cov_inverse(&self, state: &ParameterState, n: usize, component: &'static str) -> Result<DMatrix<f64>> {
        state.innovation[n]
            .state_cov_inverse(&self.basis.series[n].loading)
            .ok_or(Error::SweepFailure { component })
    }

    fn row_blocks(&self, state: &ParameterState, row: usize) -> Vec<usize> {
        state
            .kernel
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.row == row)
            .map(|(i, _)| i)
            .collect()
    }

    /// Conditional of the stacked `θ̃_Ψ` of every active block in row `row`,
    /// given the latent states, the expansion scales and `λ̃`; the factors are
    /// integrated out (innovation covariance `K_ε`).
    pub fn kernel_theta_conditional(&self, state: &ParameterState, row: usize) -> Result<GaussianConditional> {
        let blocks = self.row_blocks(state, row);
        let t_len = state.alpha.len();
        let alpha: Vec<DMatrix<f64>> = (0..self.basis.series_count()).map(|n| self.series_alpha(state, n)).collect();
        let z = self.projections(&alpha);
        let b_row = &self.basis.series[row].kernel.evaluation;
        let k_inv = self.state_cov_inverse(state, row, "kernel")?;
        let h = b_row.transpose() * &k_inv * b_row;
        let bka = b_row.transpose() * &k_inv * alpha[row].columns(1, t_len - 1);
        let dims: Vec<usize> = blocks
            .iter()
            .map(|&i| self.basis.block_dim(row, state.kernel.blocks[i].col))
            .collect();
        let total: usize = dims.iter().sum();
        let mut precision = DMatrix::zeros(total, total);
        let mut linear = DVector::zeros(total);
        let mut off_a = 0;
        for (ia, &ba) in blocks.iter().enumerate() {
            let blk_a = &state.kernel.blocks[ba];
            let za = z[blk_a.col].columns(0, t_len - 1);
            let mut off_b = 0;
            for (ib, &bb) in blocks.iter().enumerate() {
                let blk_b = &state.kernel.blocks[bb];
                let zb = z[blk_b.col].columns(0, t_len - 1);
                let s = za * zb.transpose();
                let kron = (blk_a.xi_tilde * blk_b.xi_tilde) * s.kronecker(&h);
                let mut view = precision.view_mut((off_a, off_b), (dims[ia], dims[ib]));
                view += kron;
                off_b += dims[ib];
            }
            let mut view = precision.view_mut((off_a, off_a), (dims[ia], dims[ia]));
            view += blk_a.lambda_tilde * &self.omegas[ba];
            let r = &bka * za.transpose();
            linear
                .rows_mut(off_a, dims[ia])
                .copy_from(&(blk_a.xi_tilde * DVector::from_column_slice(r.as_slice())));
            off_a += dims[ia];
        }
        GaussianConditional::from_precision(precision, &linear).ok_or(Error::SweepFailure { component: "kernel" })
    }

    /// Conditional of the expansion scales `ξ̃_Ψ` of the blocks in row `row`
    /// given `θ̃_Ψ`.
    pub fn kernel_scale_conditional(&self, state: &ParameterState, row: usize) -> Result<GaussianConditional> {
        let blocks = self.row_blocks(state, row);
        let t_len = state.alpha.len();
        let alpha: Vec<DMatrix<f64>> = (0..self.basis.series_count()).map(|n| self.series_alpha(state, n)).collect();
        let z = self.projections(&alpha);
        let b_row = &self.basis.series[row].kernel.evaluation;
        let k_inv = self.state_cov_inverse(state, row, "kernel scale")?;
        let h = b_row.transpose() * &k_inv * b_row;
        let bka = b_row.transpose() * &k_inv * alpha[row].columns(1, t_len - 1);
        let j_row = self.basis.series[row].kernel.dim();
        let u: Vec<DMatrix<f64>> = blocks
            .iter()
            .map(|&i| {
                let b = &state.kernel.blocks[i];
                let j_col = self.basis.series[b.col].kernel.dim();
                let theta_tilde: Vec<f64> = b.theta_psi.iter().map(|v| v / b.xi_tilde).collect();
                let c = coefficient_matrix(&theta_tilde, j_row, j_col)?;
                Ok(c * z[b.col].columns(0, t_len - 1))
            })
            .collect::<Result<_>>()?;
        let r = blocks.len();
        let mut precision = DMatrix::zeros(r, r);
        let mut linear = DVector::zeros(r);
        for a in 0..r {
            let hu = &h * &u[a];
            for b in 0..r {
                precision[(a, b)] = u[b].dot(&hu);
            }
            precision[(a, a)] += 1.0 / KERNEL_SCALE_PRIOR_VAR;
            linear[a] = u[a].dot(&bka);
        }
        GaussianConditional::from_precision(precision, &linear).ok_or(Error::SweepFailure { component: "kernel scale" })
    }

    /// Conditional of `λ̃_Ψ` for kernel block `block`.
    pub fn kernel_lambda_conditional(&self, state: &ParameterState, block: usize) -> TruncatedGamma {
        let b = &state.kernel.blocks[block];
        let theta_tilde = DVector::from_iterator(b.theta_psi.len(), b.theta_psi.iter().map(|v| v / b.xi_tilde));
        let q = theta_tilde.dot(&(&self.omegas[block] * &theta_tilde));
        TruncatedGamma::new(0.5 + 0.5 * b.theta_psi.len() as f64, 0.5 + 0.5 * q, 0.0, f64::INFINITY)
    }

    /// Conditional of the factors `e_t` of series `n` given its innovation.
    pub fn factor_conditional(&self, p: &InnovationParams, n: usize, eps_t: &DVector<f64>) -> Result<GaussianConditional> {
        let phi = p.loadings(&self.basis.series[n].loading);
        let s = 1.0 / p.sigma2_eta;
        let mut precision = s * phi.transpose() * &phi;
        for j in 0..p.j_eps {
            precision[(j, j)] += 1.0 / p.sigma2_factor[j];
        }
        let linear = s * phi.transpose() * eps_t;
        GaussianConditional::from_precision(precision, &linear).ok_or(Error::SweepFailure { component: "factors" })
    }

    /// Conditional of the factor precision `σ_j^{-2}` under the ordered chain
    /// prior; support is `[σ_{j-1}^{-2}, σ_{j+1}^{-2}]`.
    pub fn factor_precision_conditional(&self, p: &InnovationParams, j: usize) -> TruncatedGamma {
        let t_len = p.factors.len() as f64;
        let ss: f64 = p.factors.iter().map(|e| e[j] * e[j]).sum();
        let top = p.j_eps - 1;
        let child = if j > 0 { 1.0 } else { 0.0 };
        let lower = if j > 0 { 1.0 / p.sigma2_factor[j - 1] } else { 0.0 };
        if j == top {
            TruncatedGamma::new(
                VAGUE_GAMMA + 0.5 * t_len - child,
                VAGUE_GAMMA + 0.5 * ss,
                lower,
                f64::INFINITY,
            )
        } else {
            let upper = 1.0 / p.sigma2_factor[j + 1];
            TruncatedGamma::new(0.5 * t_len + 1.0 - child, 0.5 * ss, lower, upper)
        }
    }

    /// Conditional of `v = c²` for the move `(ξ_j, e_j, σ_j) → (c ξ_j, e_j / c,
    /// σ_j / c)`, which leaves the innovations unchanged. Its bounds keep the
    /// factor precisions ordered.
    pub fn loading_scale_conditional(&self, p: &InnovationParams, n: usize, j: usize) -> TruncatedGamma {
        let cb = &self.basis.series[n].loading;
        let col = &p.xi[j * p.j_phi..(j + 1) * p.j_phi];
        let q: f64 = cb.prior_precision_diag(p.lambda_phi).iter().zip(col).map(|(d, x)| d * x * x).sum();
        let prec = 1.0 / p.sigma2_factor[j];
        let top = j == p.j_eps - 1;
        let child = if j > 0 { 1.0 } else { 0.0 };
        let lower = if j > 0 { (1.0 / p.sigma2_factor[j - 1]) / prec } else { 0.0 };
        let mut shape = 0.5 * p.j_phi as f64 + 1.0 - child;
        let mut rate = 0.5 * q;
        let upper = if top {
            shape += VAGUE_GAMMA - 1.0;
            rate += VAGUE_GAMMA * prec;
            f64::INFINITY
        } else {
            (1.0 / p.sigma2_factor[j + 1]) / prec
        };
        TruncatedGamma::new(shape, rate, lower, upper)
    }

    /// Conditional of `σ_η^{-2}`.
    pub fn eta_precision_conditional(&self, p: &InnovationParams, n: usize, eps: &DMatrix<f64>) -> TruncatedGamma {
        let phi = p.loadings(&self.basis.series[n].loading);
        let mut ss = 0.0;
        for t in 0..eps.ncols() {
            let e = DVector::from_column_slice(&p.factors[t]);
            ss += (eps.column(t) - &phi * e).norm_squared();
        }
        let count = (eps.nrows() * eps.ncols()) as f64;
        TruncatedGamma::new(VAGUE_GAMMA + 0.5 * count, VAGUE_GAMMA + 0.5 * ss, 0.0, f64::INFINITY)
    }

    /// Conditional of loading coefficients `ξ_j`.
    pub fn loading_conditional(&self, p: &InnovationParams, n: usize, j: usize, eps: &DMatrix<f64>) -> Result<GaussianConditional> {
        let cb = &self.basis.series[n].loading;
        let b = &cb.basis.evaluation;
        let xi = p.xi_matrix();
        let s = 1.0 / p.sigma2_eta;
        let mut ee = 0.0;
        let mut resid_sum = DVector::zeros(b.nrows());
        for t in 0..eps.ncols() {
            let e = &p.factors[t];
            ee += e[j] * e[j];
            let mut others = DVector::zeros(p.j_phi);
            for k in 0..p.j_eps {
                if k != j {
                    others += xi.column(k) * e[k];
                }
            }
            resid_sum += (eps.column(t) - b * others) * e[j];
        }
        let mut precision = (s * ee) * b.transpose() * b;
        for (i, d) in cb.prior_precision_diag(p.lambda_phi).into_iter().enumerate() {
            precision[(i, i)] += d;
        }
        let linear = s * b.transpose() * resid_sum;
        GaussianConditional::from_precision(precision, &linear).ok_or(Error::SweepFailure { component: "loadings" })
    }

    /// Conditional of the loading smoothing parameter `λ_φ`, shared by the
    /// `J_ε` loading curves of a series. `None` when nothing is penalized.
    pub fn loading_smoothing_conditional(&self, p: &InnovationParams, n: usize) -> Option<TruncatedGamma> {
        let cb = &self.basis.series[n].loading;
        smoothing_conditional(cb, (0..p.j_eps).map(|j| &p.xi[j * p.j_phi..(j + 1) * p.j_phi]))
    }

    /// Conditional of the measurement precision `σ_ν^{-2}` of series `n`.
    pub fn obs_precision_conditional(&self, state: &ParameterState, n: usize) -> TruncatedGamma {
        let mu = state.mean_curve(&self.basis, n);
        let off = self.basis.offsets[n];
        let mut ss = 0.0;
        for (t, row) in self.data.observations.iter().enumerate() {
            let obs = &row[n];
            for (&c, &y) in obs.incidence.columns.iter().zip(&obs.values) {
                let r = y - mu[c] - state.alpha[t][off + c];
                ss += r * r;
            }
        }
        TruncatedGamma::new(
            VAGUE_GAMMA + 0.5 * self.total_obs[n],
            VAGUE_GAMMA + 0.5 * ss,
            0.0,
            f64::INFINITY,
        )
    }

    /// Conditional of the mean coefficients `θ_μ` of series `n`.
    pub fn mean_conditional(&self, state: &ParameterState, n: usize) -> Result<GaussianConditional> {
        let cb = &self.basis.series[n].mean;
        let b = &cb.basis.evaluation;
        let s = 1.0 / state.sigma2_nu[n];
        let off = self.basis.offsets[n];
        let mut r = DVector::zeros(b.nrows());
        for (t, row) in self.data.observations.iter().enumerate() {
            let obs = &row[n];
            for (&c, &y) in obs.incidence.columns.iter().zip(&obs.values) {
                r[c] += y - state.alpha[t][off + c];
            }
        }
        let mut weighted = b.clone();
        for i in 0..b.nrows() {
            weighted.row_mut(i).scale_mut(self.counts[n][i]);
        }
        let mut precision = s * b.transpose() * weighted;
        for (i, d) in cb.prior_precision_diag(state.mean[n].lambda_mu).into_iter().enumerate() {
            precision[(i, i)] += d;
        }
        let linear = s * b.transpose() * r;
        GaussianConditional::from_precision(precision, &linear).ok_or(Error::SweepFailure { component: "mean" })
    }

    /// Conditional of the mean smoothing parameter `λ_μ` of series `n`.
    pub fn mean_smoothing_conditional(&self, state: &ParameterState, n: usize) -> Option<TruncatedGamma> {
        smoothing_conditional(&self.basis.series[n].mean, std::iter::once(state.mean[n].theta_mu.as_slice()))
    }

    /// Sample every kernel block (θ̃, then ξ̃, then λ̃).
    fn update_kernel<R: Rng + ?Sized>(&self, state: &mut ParameterState, rng: &mut R) -> Result<()> {
        for row in 0..self.basis.series_count() {
            let blocks = self.row_blocks(state, row);
            if blocks.is_empty() {
                continue;
            }
            let draw = self.kernel_theta_conditional(state, row)?.sample(rng);
            let mut off = 0;
            for &i in &blocks {
                let b = &mut state.kernel.blocks[i];
                let d = b.theta_psi.len();
                for (dst, v) in b.theta_psi.iter_mut().zip(draw.rows(off, d).iter()) {
                    *dst = b.xi_tilde * v;
                }
                off += d;
            }
            let scales = self.kernel_scale_conditional(state, row)?.sample(rng);
            for (k, &i) in blocks.iter().enumerate() {
                let b = &mut state.kernel.blocks[i];
                let new = scales[k];
                for v in b.theta_psi.iter_mut() {
                    *v *= new / b.xi_tilde;
                }
                b.xi_tilde = new;
            }
            for &i in &blocks {
                let lt = self.kernel_lambda_conditional(state, i).sample(rng);
                state.kernel.blocks[i].lambda_tilde = lt;
            }
        }
        Ok(())
    }

    fn update_innovation<R: Rng + ?Sized>(&self, state: &mut ParameterState, rng: &mut R) -> Result<()> {
        let eps = self.innovations(state)?;
        for (n, eps_n) in eps.iter().enumerate() {
            let mut p = state.innovation[n].clone();
            for t in 0..eps_n.ncols() {
                let e = self.factor_conditional(&p, n, &eps_n.column(t).into_owned())?.sample(rng);
                p.factors[t] = e.iter().copied().collect();
            }
            for j in 0..p.j_eps {
                let prec = self.factor_precision_conditional(&p, j).sample(rng);
                p.sigma2_factor[j] = 1.0 / prec;
            }
            p.sigma2_eta = 1.0 / self.eta_precision_conditional(&p, n, eps_n).sample(rng);
            for j in 0..p.j_eps {
                let xi = self.loading_conditional(&p, n, j, eps_n)?.sample(rng);
                p.xi[j * p.j_phi..(j + 1) * p.j_phi].copy_from_slice(xi.as_slice());
            }
            for j in 0..p.j_eps {
                let v = self.loading_scale_conditional(&p, n, j).sample(rng);
                let c = v.sqrt();
                for x in &mut p.xi[j * p.j_phi..(j + 1) * p.j_phi] {
                    *x *= c;
                }
                for e in &mut p.factors {
                    e[j] /= c;
                }
                p.sigma2_factor[j] /= v;
            }
            if let Some(c) = self.loading_smoothing_conditional(&p, n) {
                p.lambda_phi = c.sample(rng);
            }
            if !(p.sigma2_eta > 0.0 && p.sigma2_eta.is_finite()) || p.sigma2_factor.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::SweepFailure { component: "factor precisions" });
            }
            state.innovation[n] = p;
        }
        Ok(())
    }

    /// Metropolis move on each series' white-noise pair `(σ_ν², σ_η²)` with
    /// the latent states integrated out. Measurement noise and the state
    /// nugget are nearly confounded, so the moves along `log(σ_ν² + σ_η²)`
    /// and the logit of the nugget share are proposed jointly. Returns the
    /// state smoother of the accepted values.
    fn update_noise_split<R: Rng + ?Sized>(&self, state: &mut ParameterState, rng: &mut R) -> Result<statespace::PrecisionSmoother> {
        let fail = |_| Error::SweepFailure { component: "latent states" };
        let current = statespace::PrecisionSmoother::new(self.data, &assemble_dlm(state, &self.spec, &self.basis)?).map_err(fail)?;
        let mut proposal = state.clone();
        let mut log_ratio = 0.0;
        for n in 0..self.basis.series_count() {
            let (nu, eta) = (state.sigma2_nu[n], state.innovation[n].sigma2_eta);
            let (s, f) = (nu + eta, eta / (nu + eta));
            let s_new = s * (NOISE_STEP_TOTAL * rng.sample::<f64, _>(StandardNormal)).exp();
            let logit = (f / (1.0 - f)).ln() + NOISE_STEP_SHARE * rng.sample::<f64, _>(StandardNormal);
            let f_new = 1.0 / (1.0 + (-logit).exp());
            let (nu_new, eta_new) = (s_new * (1.0 - f_new), s_new * f_new);
            log_ratio += noise_log_target(nu_new, eta_new) - noise_log_target(nu, eta);
            proposal.sigma2_nu[n] = nu_new;
            proposal.innovation[n].sigma2_eta = eta_new;
        }
        if !log_ratio.is_finite() {
            return Ok(current);
        }
        let Ok(candidate) = statespace::PrecisionSmoother::new(self.data, &assemble_dlm(&proposal, &self.spec, &self.basis)?) else {
            return Ok(current);
        };
        log_ratio += candidate.loglik() - current.loglik();
        if rng.gen::<f64>().ln() < log_ratio {
            for n in 0..self.basis.series_count() {
                state.sigma2_nu[n] = proposal.sigma2_nu[n];
                state.innovation[n].sigma2_eta = proposal.innovation[n].sigma2_eta;
            }
            Ok(candidate)
        } else {
            Ok(current)
        }
    }

    fn update_mean<R: Rng + ?Sized>(&self, state: &mut ParameterState, rng: &mut R) -> Result<()> {
        for n in 0..self.basis.series_count() {
            let theta = self.mean_conditional(state, n)?.sample(rng);
            state.mean[n].theta_mu = theta.iter().copied().collect();
            if let Some(c) = self.mean_smoothing_conditional(state, n) {
                state.mean[n].lambda_mu = c.sample(rng);
            }
        }
        Ok(())
    }

    /// One full sweep. Returns the state that the latent-state draw was
    /// conditioned on (with those latent states) and its log-likelihood.
    pub fn sweep<R: Rng + ?Sized>(&self, state: &mut ParameterState, rng: &mut R) -> Result<(ParameterState, f64)> {
        self.update_kernel(state, rng)?;
        self.update_innovation(state, rng)?;
        for n in 0..self.basis.series_count() {
            let prec = self.obs_precision_conditional(state, n).sample(rng);
            state.sigma2_nu[n] = 1.0 / prec;
        }
        let smoother = self.update_noise_split(state, rng)?;
        let fail = |_| Error::SweepFailure { component: "latent states" };
        let alpha = smoother.sample(rng).map_err(fail)?;
        let loglik = smoother.loglik();
        state.alpha = alpha.into_iter().map(|a| a.iter().copied().collect()).collect();
        let snapshot = state.clone();
        self.update_mean(state, rng)?;
        Ok((snapshot, loglik))
    }

    /// Log prior density of the parameters (latent states and factors
    /// excluded), with `θ_Ψ` as the kernel coordinates. `−∞` outside the
    /// support.
    pub fn log_prior(&self, state: &ParameterState) -> f64 {
        let mut total = 0.0;
        for (n, s) in self.basis.series.iter().enumerate() {
            let m = &state.mean[n];
            total += curve_prior(&s.mean, &[m.theta_mu.as_slice()], m.lambda_mu);
            total += gamma_ln_pdf(1.0 / state.sigma2_nu[n], VAGUE_GAMMA, VAGUE_GAMMA);
            let p = &state.innovation[n];
            total += gamma_ln_pdf(1.0 / p.sigma2_eta, VAGUE_GAMMA, VAGUE_GAMMA);
            total += factor_chain_prior(&p.sigma2_factor);
            let cols: Vec<&[f64]> = (0..p.j_eps).map(|j| &p.xi[j * p.j_phi..(j + 1) * p.j_phi]).collect();
            total += curve_prior(&s.loading, &cols, p.lambda_phi);
        }
        for (i, b) in state.kernel.blocks.iter().enumerate() {
            let lambda = b.lambda_psi();
            let theta = DVector::from_column_slice(&b.theta_psi);
            let d = theta.len() as f64;
            total += 0.5 * (d * (lambda.ln() - LN_2PI) + self.omega_logdets[i]) - 0.5 * lambda * theta.dot(&(&self.omegas[i] * &theta));
            total += normal_ln_pdf(b.xi_tilde, 0.0, KERNEL_SCALE_PRIOR_VAR);
            total += gamma_ln_pdf(b.lambda_tilde, 0.5, 0.5);
        }
        total += normal_ln_pdf(state.kernel.kappa.ln(), 0.0, LOG_KAPPA_PRIOR_VAR);
        if total.is_nan() {
            f64::NEG_INFINITY
        } else {
            total
        }
    }
}

/// Proposal scales of the white-noise move: log total variance and logit of
/// the nugget share.
const NOISE_STEP_TOTAL: f64 = 0.03;
const NOISE_STEP_SHARE: f64 = 0.4;

/// Log prior of `(σ_ν², σ_η²)` in the coordinates `(log(σ_ν² + σ_η²),
/// logit(σ_η² / (σ_ν² + σ_η²)))`.
fn noise_log_target(nu: f64, eta: f64) -> f64 {
    let s = nu + eta;
    let f = eta / s;
    gamma_ln_pdf(1.0 / nu, VAGUE_GAMMA, VAGUE_GAMMA) - 2.0 * nu.ln() + gamma_ln_pdf(1.0 / eta, VAGUE_GAMMA, VAGUE_GAMMA) - 2.0 * eta.ln()
        + 2.0 * s.ln()
        + f.ln()
        + (1.0 - f).ln()
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-density of `λ` when `λ^{-1/2} ~ Uniform(0, 10^4)`.
pub fn smoothing_ln_prior(lambda: f64) -> f64 {
    if lambda < SMOOTHING_FLOOR || !lambda.is_finite() {
        return f64::NEG_INFINITY;
    }
    (0.5 / SMOOTHING_SD_UPPER).ln() - 1.5 * lambda.ln()
}

/// Prior of one or more coefficient vectors sharing a smoothing parameter:
/// flat `N(0, 10^8)` on the unpenalized coordinates, `N(0, λ^{-1})` on the
/// rest, plus the prior on `λ` when something is penalized.
fn curve_prior(cb: &CurveBasis, cols: &[&[f64]], lambda: f64) -> f64 {
    let mut total = 0.0;
    for col in cols {
        for (j, &v) in col.iter().enumerate() {
            total += if j < cb.unpenalized {
                normal_ln_pdf(v, 0.0, FLAT_PRIOR_VARIANCE)
            } else {
                normal_ln_pdf(v, 0.0, 1.0 / lambda)
            };
        }
    }
    if cb.penalized() > 0 {
        total += smoothing_ln_prior(lambda);
    }
    total
}

/// Ordered chain prior on factor precisions: `σ_J^{-2} ~ Gamma(10^{-3}, 10^{-3})`
/// and `σ_j^{-2} | σ_{j+1}^{-2} ~ Uniform(0, σ_{j+1}^{-2})`.
pub fn factor_chain_prior(sigma2: &[f64]) -> f64 {
    let prec: Vec<f64> = sigma2.iter().map(|v| 1.0 / v).collect();
    let j = prec.len();
    let mut total = gamma_ln_pdf(prec[j - 1], VAGUE_GAMMA, VAGUE_GAMMA);
    for k in 0..j - 1 {
        if !(prec[k] > 0.0 && prec[k] <= prec[k + 1]) {
            return f64::NEG_INFINITY;
        }
        total -= prec[k + 1].ln();
    }
    total
}

fn smoothing_conditional<'s>(cb: &CurveBasis, cols: impl Iterator<Item = &'s [f64]>) -> Option<TruncatedGamma> {
    let p = cb.penalized();
    if p == 0 {
        return None;
    }
    let mut ss = 0.0;
    let mut count = 0;
    for col in cols {
        ss += col[cb.unpenalized..].iter().map(|v| v * v).sum::<f64>();
        count += p;
    }
    Some(TruncatedGamma::new(
        0.5 * (count as f64 - 1.0),
        0.5 * ss.max(f64::MIN_POSITIVE),
        SMOOTHING_FLOOR,
        f64::INFINITY,
    ))
}

/// Penalized least squares `(B'B + λP) c = B'y` with a tiny ridge on the
/// unpenalized coordinates; returns the coefficients and the trace of the
/// hat matrix.
fn penalized_fit(b: &DMatrix<f64>, y: &DVector<f64>, penalty: &[f64], lambda: f64) -> Option<(DVector<f64>, f64)> {
    let mut a = b.transpose() * b;
    for (i, p) in penalty.iter().enumerate() {
        a[(i, i)] += lambda * p + 1e-8;
    }
    let chol = cholesky_jittered(&a)?;
    let coef = chol.solve(&(b.transpose() * y));
    let hat = (chol.solve(&(b.transpose() * b))).trace();
    Some((coef, hat))
}

fn penalty_diag(cb: &CurveBasis) -> Vec<f64> {
    (0..cb.dim()).map(|j| if j < cb.unpenalized { 0.0 } else { 1.0 }).collect()
}

/// Smoothing parameter minimizing generalized cross-validation.
fn gcv_lambda(b: &DMatrix<f64>, y: &DVector<f64>, penalty: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mut best = (f64::INFINITY, 1.0);
    for k in -24..=24 {
        let lambda = 10f64.powf(k as f64 * 0.25);
        if let Some((c, tr)) = penalized_fit(b, y, penalty, lambda) {
            let rss = (y - b * c).norm_squared();
            let denom = (n - tr).max(1e-3);
            let g = n * rss / (denom * denom);
            if g < best.0 {
                best = (g, lambda);
            }
        }
    }
    best.1
}

/// Rows of `m` at the given indices.
fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Ridge estimate of the kernel coefficients for every active block of row
/// `row`, treating the innovations as white (`K_ε = I`) with `λ_Ψ = 1` and
/// unit expansion scale: the mean of the resulting Gaussian conditional.
pub fn init_kernel_ridge(sampler: &Sampler<'_>, alpha: &[DMatrix<f64>], row: usize) -> Result<Vec<DVector<f64>>> {
    let basis = &sampler.basis;
    let t_len = alpha[0].ncols();
    let z = sampler.projections(alpha);
    let cols: Vec<(usize, usize)> = sampler
        .spec
        .active_blocks()
        .into_iter()
        .enumerate()
        .filter(|(_, (r, _))| *r == row)
        .map(|(i, (_, c))| (i, c))
        .collect();
    let b_row = &basis.series[row].kernel.evaluation;
    let h = b_row.transpose() * b_row;
    let ba = b_row.transpose() * alpha[row].columns(1, t_len - 1);
    let dims: Vec<usize> = cols.iter().map(|&(_, c)| basis.block_dim(row, c)).collect();
    let total: usize = dims.iter().sum();
    let mut a = DMatrix::zeros(total, total);
    let mut rhs = DVector::zeros(total);
    let mut oa = 0;
    for (ia, &(blk, ca)) in cols.iter().enumerate() {
        let za = z[ca].columns(0, t_len - 1);
        let mut ob = 0;
        for (ib, &(_, cb)) in cols.iter().enumerate() {
            let zb = z[cb].columns(0, t_len - 1);
            let mut v = a.view_mut((oa, ob), (dims[ia], dims[ib]));
            v += (za * zb.transpose()).kronecker(&h);
            ob += dims[ib];
        }
        let mut v = a.view_mut((oa, oa), (dims[ia], dims[ia]));
        v += sampler.omega(blk);
        let r = &ba * za.transpose();
        rhs.rows_mut(oa, dims[ia]).copy_from(&DVector::from_column_slice(r.as_slice()));
        oa += dims[ia];
    }
    let chol = cholesky_jittered(&a).ok_or_else(|| Error::InitFailure("kernel ridge system is singular".into()))?;
    let sol = chol.solve(&rhs);
    let mut out = Vec::new();
    let mut off = 0;
    for d in dims {
        out.push(sol.rows(off, d).into_owned());
        off += d;
    }
    Ok(out)
}

/// Starting values: smooth mean, per-time spline fits for the states,
/// residual variance, ridge kernel, and an SVD of the implied innovations
/// for the factor model.
pub fn initialize(sampler: &Sampler<'_>) -> Result<ParameterState> {
    let data = sampler.data;
    let basis = &sampler.basis;
    let t_len = data.len();
    let k = basis.series_count();
    let mut mean = Vec::with_capacity(k);
    let mut alpha_mats = Vec::with_capacity(k);
    let mut sigma2_nu = Vec::with_capacity(k);
    for n in 0..k {
        let s = &basis.series[n];
        let m = s.grid_len();
        let b = &s.mean.basis.evaluation;
        let pen = penalty_diag(&s.mean);
        let mut sums = vec![0.0; m];
        let mut counts = vec![0.0; m];
        for row in &data.observations {
            for (&c, &y) in row[n].incidence.columns.iter().zip(&row[n].values) {
                sums[c] += y;
                counts[c] += 1.0;
            }
        }
        let seen: Vec<usize> = (0..m).filter(|&i| counts[i] > 0.0).collect();
        if seen.is_empty() {
            return Err(Error::InitFailure(format!("series {n} has no observations")));
        }
        let ybar = DVector::from_iterator(seen.len(), seen.iter().map(|&i| sums[i] / counts[i]));
        let bs = select_rows(b, &seen);
        let lambda = if s.mean.penalized() > 0 { gcv_lambda(&bs, &ybar, &pen) } else { 1.0 };
        let (theta_mu, _) = penalized_fit(&bs, &ybar, &pen, lambda).ok_or_else(|| Error::InitFailure("mean fit failed".into()))?;
        let mu = b * &theta_mu;
        let mut a = DMatrix::zeros(m, t_len);
        let mut ss = 0.0;
        let mut cnt = 0.0;
        for (t, row) in data.observations.iter().enumerate() {
            let obs = &row[n];
            if obs.is_empty() {
                continue;
            }
            let bt = select_rows(b, &obs.incidence.columns);
            let yt = DVector::from_iterator(obs.len(), obs.incidence.columns.iter().zip(&obs.values).map(|(&c, &y)| y - mu[c]));
            let (c, _) = penalized_fit(&bt, &yt, &pen, lambda).ok_or_else(|| Error::InitFailure("state fit failed".into()))?;
            let fit = b * c;
            for (&col, r) in obs.incidence.columns.iter().zip(yt.iter()) {
                let d = r - fit[col];
                ss += d * d;
                cnt += 1.0;
            }
            a.set_column(t, &fit);
        }
        let scale = ybar.iter().map(|v| v * v).sum::<f64>() / ybar.len() as f64;
        sigma2_nu.push((ss / cnt).max(1e-10 * scale.max(1.0)));
        mean.push(MeanParams {
            theta_mu: theta_mu.iter().copied().collect(),
            lambda_mu: lambda.max(SMOOTHING_FLOOR),
        });
        alpha_mats.push(a);
    }
    let mut blocks = Vec::new();
    for row in 0..k {
        let fits = init_kernel_ridge(sampler, &alpha_mats, row)?;
        let cols: Vec<usize> = sampler.spec.active_blocks().into_iter().filter(|(r, _)| *r == row).map(|(_, c)| c).collect();
        for (c, theta) in cols.into_iter().zip(fits) {
            blocks.push(KernelBlock {
                row,
                col: c,
                theta_psi: theta.iter().copied().collect(),
                xi_tilde: 1.0,
                lambda_tilde: 1.0,
            });
        }
    }
    let alpha: Vec<Vec<f64>> = (0..t_len)
        .map(|t| alpha_mats.iter().flat_map(|a| a.column(t).iter().copied().collect::<Vec<_>>()).collect())
        .collect();
    let mut state = ParameterState {
        mean,
        sigma2_nu,
        kernel: KernelParams {
            blocks,
            kappa: sampler.kappa,
        },
        innovation: Vec::new(),
        alpha,
    };
    // Placeholder innovation parameters so the innovations can be formed.
    state.innovation = basis
        .series
        .iter()
        .map(|s| InnovationParams {
            xi: vec![0.0; s.loading.dim() * s.j_eps],
            j_phi: s.loading.dim(),
            j_eps: s.j_eps,
            factors: vec![vec![0.0; s.j_eps]; t_len],
            sigma2_factor: vec![1.0; s.j_eps],
            sigma2_eta: 1.0,
            lambda_phi: 1.0,
        })
        .collect();
    let eps = sampler.innovations(&state)?;
    for (n, e) in eps.iter().enumerate() {
        state.innovation[n] = init_factor_model(&basis.series[n].loading, basis.series[n].j_eps, e)?;
    }
    Ok(state)
}

/// Factor model from an SVD of the stacked innovations `E' = U D V'`.
fn init_factor_model(cb: &CurveBasis, j_eps: usize, eps: &DMatrix<f64>) -> Result<InnovationParams> {
    let (m, t_len) = eps.shape();
    if j_eps > m.min(t_len) {
        return Err(Error::InitFailure(format!(
            "J_eps = {j_eps} exceeds min(T, M) = {}",
            m.min(t_len)
        )));
    }
    if eps.iter().any(|v| !v.is_finite()) {
        return Err(Error::InitFailure("non-finite innovations".into()));
    }
    let svd = eps.transpose().svd(true, true);
    let u = svd.u.ok_or_else(|| Error::InitFailure("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::InitFailure("SVD failed".into()))?;
    // nalgebra returns singular values unsorted for some shapes.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let b = &cb.basis.evaluation;
    let btb = b.transpose() * b + DMatrix::identity(cb.dim(), cb.dim()) * 1e-10;
    let chol = cholesky_jittered(&btb).ok_or_else(|| Error::InitFailure("loading basis is singular".into()))?;
    let j_phi = cb.dim();
    let mut xi = Vec::with_capacity(j_phi * j_eps);
    let mut factors = vec![vec![0.0; j_eps]; t_len];
    let mut sigma2_factor = Vec::with_capacity(j_eps);
    for (j, &k) in order.iter().take(j_eps).enumerate() {
        let v = v_t.row(k).transpose();
        xi.extend(chol.solve(&(b.transpose() * v)).iter().copied());
        let d = svd.singular_values[k];
        let mut ss = 0.0;
        for t in 0..t_len {
            let e = u[(t, k)] * d;
            factors[t][j] = e;
            ss += e * e;
        }
        sigma2_factor.push((ss / t_len as f64).max(1e-12));
    }
    // Keep the ordering the chain prior requires after flooring.
    for j in 1..j_eps {
        sigma2_factor[j] = sigma2_factor[j].min(sigma2_factor[j - 1]);
    }
    let mut p = InnovationParams {
        xi,
        j_phi,
        j_eps,
        factors,
        sigma2_factor,
        sigma2_eta: 1.0,
        lambda_phi: 1.0,
    };
    let phi = p.loadings(cb);
    let mut ss = 0.0;
    for t in 0..t_len {
        ss += (eps.column(t) - &phi * DVector::from_column_slice(&p.factors[t])).norm_squared();
    }
    let scale = eps.norm_squared() / (m * t_len) as f64;
    p.sigma2_eta = (ss / (m * t_len) as f64).max(1e-6 * scale).max(1e-12);
    if !p.sigma2_eta.is_finite() {
        return Err(Error::InitFailure("non-finite approximation error variance".into()));
    }
    Ok(p)
}

/// Chain state that can be checkpointed and resumed bit-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: GibbsConfig,
    pub spec: ModelSpec,
    pub iteration: usize,
    pub state: ParameterState,
    pub rng: ChaCha8Rng,
    pub sample: PosteriorSample,
}

/// A running chain.
pub struct Chain<'a> {
    pub sampler: Sampler<'a>,
    pub config: GibbsConfig,
    pub state: ParameterState,
    pub iteration: usize,
    pub sample: PosteriorSample,
    rng: ChaCha8Rng,
}

impl<'a> Chain<'a> {
    pub fn new(data: &'a FunctionalSample, spec: &ModelSpec, config: &GibbsConfig) -> Result<Self> {
        config.validate()?;
        let sampler = Sampler::new(data, spec, &config.dims, config.kappa)?;
        let state = initialize(&sampler)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(config.stream);
        Ok(Self {
            sampler,
            config: config.clone(),
            state,
            iteration: 0,
            sample: PosteriorSample::default(),
            rng,
        })
    }

    pub fn resume(data: &'a FunctionalSample, checkpoint: Checkpoint) -> Result<Self> {
        let sampler = Sampler::new(data, &checkpoint.spec, &checkpoint.config.dims, checkpoint.config.kappa)?;
        checkpoint.state.check_shape(&sampler.basis, &sampler.spec)?;
        Ok(Self {
            sampler,
            config: checkpoint.config,
            state: checkpoint.state,
            iteration: checkpoint.iteration,
            sample: checkpoint.sample,
            rng: checkpoint.rng,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            spec: self.sampler.spec.clone(),
            iteration: self.iteration,
            state: self.state.clone(),
            rng: self.rng.clone(),
            sample: self.sample.clone(),
        }
    }

    /// Run sweeps until `until` iterations (capped at the configured total)
    /// have been completed.
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let stop = until.min(self.config.iterations);
        let burn = self.config.burn_in();
        while self.iteration < stop {
            let (mut snapshot, loglik) = self
                .sampler
                .sweep(&mut self.state, &mut self.rng)
                .map_err(|e| Error::ChainFailure {
                    iteration: self.iteration,
                    source: Box::new(e),
                })?;
            if self.iteration >= burn && (self.iteration - burn).is_multiple_of(self.config.thin) {
                if !self.config.keep_full_latent {
                    let last = snapshot.alpha.pop().unwrap_or_default();
                    snapshot.alpha = vec![last];
                }
                let log_prior = self.sampler.log_prior(&snapshot);
                self.sample.draws.push(Draw {
                    iteration: self.iteration,
                    state: snapshot,
                    loglik,
                    log_prior,
                });
            }
            self.iteration += 1;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<PosteriorSample> {
        self.run_until(self.config.iterations)?;
        Ok(self.sample)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Initialize and run a chain to completion.
pub fn run_chain(data: &FunctionalSample, spec: &ModelSpec, config: &GibbsConfig) -> Result<PosteriorSample> {
    Chain::new(data, spec, config)?.finish()
}
