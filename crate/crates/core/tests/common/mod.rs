//! Shared fixtures and independent density oracles for the integration
//! tests.

#![allow(dead_code)]

use ftsgc_core::gibbs::{Chain, GibbsConfig, Sampler};
use ftsgc_core::grid::make_grid;
use ftsgc_core::model::{BasisDims, Dlm, FunctionalSample, ModelSpec, ParameterState};
use ftsgc_core::statespace::{smoother_log_density, PrecisionSmoother};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - 0.5 * (x - mean).powi(2) / var
}

pub fn ln_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Density of `λ` when `λ^{-1/2} ~ Uniform(0, 10^4)`.
pub fn ln_smoothing_prior(lambda: f64) -> f64 {
    assert!(lambda >= 1e-8);
    (0.5e-4f64).ln() - 1.5 * lambda.ln()
}

/// `log N(x; mean, cov)` by an unjittered Cholesky factorization.
pub fn ln_mvn(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let d = x - mean;
    let w = chol.l().solve_lower_triangular(&d).unwrap();
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    -0.5 * (x.len() as f64 * LN_2PI + logdet + w.norm_squared())
}

pub fn standard_normals(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Two series on `m` points over `t_len` times with mild cross dependence.
pub fn toy_sample(t_len: usize, m: usize, seed: u64) -> FunctionalSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau: Vec<f64> = (0..m).map(|i| i as f64 / (m - 1) as f64).collect();
    let grid = make_grid(&[tau.clone(), tau.clone()]).unwrap();
    let mut x = vec![0.0; m];
    let mut y = vec![0.0; m];
    let mut curves = Vec::new();
    for _ in 0..t_len {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        let xm = x.iter().sum::<f64>() / m as f64;
        for i in 0..m {
            x[i] = 0.5 * x[i] + 0.3 * a * (3.0 * tau[i]).sin();
            y[i] = 0.4 * y[i] + 0.5 * xm + 0.3 * b * tau[i];
        }
        let noise = |rng: &mut ChaCha8Rng| 0.05 * rng.sample::<f64, _>(StandardNormal);
        curves.push(vec![
            y.iter().map(|v| v + 1.0 + noise(&mut rng)).collect(),
            x.iter().map(|v| v - 0.5 + noise(&mut rng)).collect(),
        ]);
    }
    FunctionalSample::from_dense(grid, vec!["y".into(), "x".into()], &curves).unwrap()
}

pub fn toy_dims() -> BasisDims {
    BasisDims {
        j_mu: Some(3),
        j_phi: Some(3),
        j_psi: 4,
        j_eps: 2,
    }
}

/// A generic posterior state: initialization followed by a few sweeps.
pub fn warm_state<'a>(data: &'a FunctionalSample, spec: &ModelSpec, sweeps: usize, seed: u64) -> (Sampler<'a>, ParameterState) {
    let config = GibbsConfig {
        iterations: sweeps + 1,
        burn_in: Some(sweeps),
        seed,
        dims: toy_dims(),
        ..GibbsConfig::default()
    };
    let mut chain = Chain::new(data, spec, &config).unwrap();
    chain.run_until(sweeps).unwrap();
    (chain.sampler.clone(), chain.state.clone())
}

/// `K_ε = Φ Σ_e Φ' + σ_η² I` for series `n`.
fn innovation_cov(s: &Sampler<'_>, st: &ParameterState, n: usize) -> DMatrix<f64> {
    let p = &st.innovation[n];
    let b = &s.basis.series[n].loading.basis.evaluation;
    let m = b.nrows();
    let mut k = DMatrix::identity(m, m) * p.sigma2_eta;
    for j in 0..p.j_eps {
        let xi = DVector::from_column_slice(&p.xi[j * p.j_phi..(j + 1) * p.j_phi]);
        let phi = b * xi;
        k += p.sigma2_factor[j] * &phi * phi.transpose();
    }
    k
}

fn series_alpha(s: &Sampler<'_>, st: &ParameterState, n: usize, t: usize) -> DVector<f64> {
    let off = s.basis.offsets[n];
    let m = s.basis.series[n].grid_len();
    DVector::from_iterator(m, (0..m).map(|i| st.alpha[t][off + i]))
}

/// `Ψ_{nm} diag(w_m)` from the coefficient vector, written out directly.
fn transition_block(s: &Sampler<'_>, theta: &[f64], n: usize, m: usize) -> DMatrix<f64> {
    let bn = &s.basis.series[n].kernel.evaluation;
    let bm = &s.basis.series[m].kernel.evaluation;
    let c = DMatrix::from_fn(bn.ncols(), bm.ncols(), |a, b| theta[a + b * bn.ncols()]);
    let mut g = bn * c * bm.transpose();
    for j in 0..g.ncols() {
        let w = s.basis.series[m].weights[j];
        g.column_mut(j).scale_mut(w);
    }
    g
}

/// `log p(y, α, Θ)` with the factors integrated out, the kernel in its
/// expanded coordinates `(θ̃, ξ̃, λ̃)`.
pub fn collapsed_log_joint(s: &Sampler<'_>, st: &ParameterState) -> f64 {
    let k = s.basis.series.len();
    let mut total = 0.0;
    for n in 0..k {
        let bm = &s.basis.series[n].mean.basis.evaluation;
        let mu = bm * DVector::from_column_slice(&st.mean[n].theta_mu);
        let off = s.basis.offsets[n];
        for (t, row) in s.data.observations.iter().enumerate() {
            for (&c, &y) in row[n].incidence.columns.iter().zip(&row[n].values) {
                total += ln_normal(y, mu[c] + st.alpha[t][off + c], st.sigma2_nu[n]);
            }
        }
        let cov = innovation_cov(s, st, n);
        for t in 0..st.alpha.len() {
            let mut mean = DVector::zeros(cov.nrows());
            if t > 0 {
                for b in st.kernel.blocks.iter().filter(|b| b.row == n) {
                    mean += transition_block(s, &b.theta_psi, n, b.col) * series_alpha(s, st, b.col, t - 1);
                }
            }
            total += ln_mvn(&series_alpha(s, st, n, t), &mean, &cov);
        }
        // Mean curve prior.
        let cb = &s.basis.series[n].mean;
        let lam = st.mean[n].lambda_mu;
        for (j, &v) in st.mean[n].theta_mu.iter().enumerate() {
            total += if j < cb.unpenalized { ln_normal(v, 0.0, 1e8) } else { ln_normal(v, 0.0, 1.0 / lam) };
        }
        if cb.penalized() > 0 {
            total += ln_smoothing_prior(lam);
        }
        total += ln_gamma_pdf(1.0 / st.sigma2_nu[n], 1e-3, 1e-3);
    }
    for (i, b) in st.kernel.blocks.iter().enumerate() {
        let om = s.omega(i);
        let tt = DVector::from_iterator(b.theta_psi.len(), b.theta_psi.iter().map(|v| v / b.xi_tilde));
        let cov = (om * b.lambda_tilde).try_inverse().unwrap();
        total += ln_mvn(&tt, &DVector::zeros(tt.len()), &cov);
        total += ln_normal(b.xi_tilde, 0.0, 1e6);
        total += ln_gamma_pdf(b.lambda_tilde, 0.5, 0.5);
    }
    total
}

/// `log p(ε, e, FDLM parameters)` for series `n` given the innovations.
pub fn fdlm_log_joint(s: &Sampler<'_>, st: &ParameterState, n: usize, eps: &DMatrix<f64>) -> f64 {
    let p = &st.innovation[n];
    let cb = &s.basis.series[n].loading;
    let b = &cb.basis.evaluation;
    let xi = DMatrix::from_column_slice(p.j_phi, p.j_eps, &p.xi);
    let phi = b * xi;
    let mut total = 0.0;
    for t in 0..eps.ncols() {
        let e = DVector::from_column_slice(&p.factors[t]);
        let fit = &phi * &e;
        for i in 0..eps.nrows() {
            total += ln_normal(eps[(i, t)], fit[i], p.sigma2_eta);
        }
        for j in 0..p.j_eps {
            total += ln_normal(e[j], 0.0, p.sigma2_factor[j]);
        }
    }
    let prec: Vec<f64> = p.sigma2_factor.iter().map(|v| 1.0 / v).collect();
    let top = p.j_eps - 1;
    total += ln_gamma_pdf(prec[top], 1e-3, 1e-3);
    for j in 0..top {
        assert!(prec[j] <= prec[j + 1]);
        total -= prec[j + 1].ln();
    }
    total += ln_gamma_pdf(1.0 / p.sigma2_eta, 1e-3, 1e-3);
    for j in 0..p.j_eps {
        for (i, &v) in p.xi[j * p.j_phi..(j + 1) * p.j_phi].iter().enumerate() {
            total += if i < cb.unpenalized { ln_normal(v, 0.0, 1e8) } else { ln_normal(v, 0.0, 1.0 / p.lambda_phi) };
        }
    }
    if cb.penalized() > 0 {
        total += ln_smoothing_prior(p.lambda_phi);
    }
    total
}

/// Spread of `log conditional − log joint` over the evaluation points.
fn spread(diffs: &[f64]) -> f64 {
    diffs.iter().map(|d| (d - diffs[0]).abs()).fold(0.0, f64::max)
}

fn jitter_positive(v: f64, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    if hi.is_finite() {
        lo + (hi - lo) * rng.gen_range(0.05..0.95)
    } else {
        (v * rng.gen_range(-0.3f64..0.3).exp()).max(lo * 1.01 + 1e-300)
    }
}

/// For every Gibbs block, the largest deviation from a constant of
/// `log full conditional − log joint` over `points` random values of the
/// block with everything else held fixed.
pub fn conditional_spreads(s: &Sampler<'_>, base: &ParameterState, points: usize, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let k = s.basis.series.len();

    // Kernel coefficients θ̃, per response row.
    for row in 0..k {
        let idx: Vec<usize> = (0..base.kernel.blocks.len()).filter(|&i| base.kernel.blocks[i].row == row).collect();
        if idx.is_empty() {
            continue;
        }
        let cond = s.kernel_theta_conditional(base, row).unwrap();
        let mut diffs = Vec::new();
        for _ in 0..points {
            let x = cond.sample(&mut rng);
            let mut st = base.clone();
            let mut off = 0;
            for &i in &idx {
                let b = &mut st.kernel.blocks[i];
                let d = b.theta_psi.len();
                b.theta_psi = x.rows(off, d).iter().map(|v| v * b.xi_tilde).collect();
                off += d;
            }
            diffs.push(cond.ln_pdf(&x) - collapsed_log_joint(s, &st));
        }
        out.push((format!("kernel coefficients (row {row})"), spread(&diffs)));

        let cond = s.kernel_scale_conditional(base, row).unwrap();
        let mut diffs = Vec::new();
        for _ in 0..points {
            let x = cond.sample(&mut rng);
            let mut st = base.clone();
            for (kk, &i) in idx.iter().enumerate() {
                let b = &mut st.kernel.blocks[i];
                let old = b.xi_tilde;
                b.theta_psi.iter_mut().for_each(|v| *v *= x[kk] / old);
                b.xi_tilde = x[kk];
            }
            diffs.push(cond.ln_pdf(&x) - collapsed_log_joint(s, &st));
        }
        out.push((format!("kernel expansion scales (row {row})"), spread(&diffs)));
    }
    for i in 0..base.kernel.blocks.len() {
        let cond = s.kernel_lambda_conditional(base, i);
        let mut diffs = Vec::new();
        for _ in 0..points {
            let v = jitter_positive(base.kernel.blocks[i].lambda_tilde, cond.lower, cond.upper, &mut rng);
            let mut st = base.clone();
            st.kernel.blocks[i].lambda_tilde = v;
            diffs.push(cond.ln_kernel(v) - collapsed_log_joint(s, &st));
        }
        let b = &base.kernel.blocks[i];
        out.push((format!("kernel smoothing ({}, {})", b.row, b.col), spread(&diffs)));
    }

    // FDLM blocks against the full joint with the factors.
    let eps = s.innovations(base).unwrap();
    for n in 0..k {
        let p0 = &base.innovation[n];
        let with = |p: ftsgc_core::model::InnovationParams| {
            let mut st = base.clone();
            st.innovation[n] = p;
            fdlm_log_joint(s, &st, n, &eps[n])
        };
        let mut diffs = Vec::new();
        for _ in 0..points {
            let mut p = p0.clone();
            let mut lc = 0.0;
            for t in 0..eps[n].ncols() {
                let c = s.factor_conditional(p0, n, &eps[n].column(t).into_owned()).unwrap();
                let x = c.sample(&mut rng);
                lc += c.ln_pdf(&x);
                p.factors[t] = x.iter().copied().collect();
            }
            diffs.push(lc - with(p));
        }
        out.push((format!("factors (series {n})"), spread(&diffs)));

        for j in 0..p0.j_eps {
            let c = s.factor_precision_conditional(p0, j);
            let mut diffs = Vec::new();
            for _ in 0..points {
                let v = jitter_positive(1.0 / p0.sigma2_factor[j], c.lower, c.upper, &mut rng);
                let mut p = p0.clone();
                p.sigma2_factor[j] = 1.0 / v;
                diffs.push(c.ln_kernel(v) - with(p));
            }
            out.push((format!("factor precision {j} (series {n})"), spread(&diffs)));
        }

        let c = s.eta_precision_conditional(p0, n, &eps[n]);
        let mut diffs = Vec::new();
        for _ in 0..points {
            let v = jitter_positive(1.0 / p0.sigma2_eta, c.lower, c.upper, &mut rng);
            let mut p = p0.clone();
            p.sigma2_eta = 1.0 / v;
            diffs.push(c.ln_kernel(v) - with(p));
        }
        out.push((format!("approximation-error precision (series {n})"), spread(&diffs)));

        for j in 0..p0.j_eps {
            let c = s.loading_conditional(p0, n, j, &eps[n]).unwrap();
            let mut diffs = Vec::new();
            for _ in 0..points {
                let x = c.sample(&mut rng);
                let mut p = p0.clone();
                p.xi[j * p.j_phi..(j + 1) * p.j_phi].copy_from_slice(x.as_slice());
                diffs.push(c.ln_pdf(&x) - with(p));
            }
            out.push((format!("loading curve {j} (series {n})"), spread(&diffs)));
        }

        // Rescaling move: the target in ln c is the joint at the moved point
        // times the Jacobian c^{J_φ − T + 2}.
        for j in 0..p0.j_eps {
            let c = s.loading_scale_conditional(p0, n, j);
            let mut diffs = Vec::new();
            for _ in 0..points {
                let v = jitter_positive(1.0, c.lower, c.upper, &mut rng);
                let scale = v.sqrt();
                let mut p = p0.clone();
                for x in &mut p.xi[j * p.j_phi..(j + 1) * p.j_phi] {
                    *x *= scale;
                }
                for e in &mut p.factors {
                    e[j] /= scale;
                }
                p.sigma2_factor[j] /= v;
                let jac = (p0.j_phi as f64 - p0.factors.len() as f64 + 2.0) * scale.ln();
                diffs.push(c.ln_kernel(v) + v.ln() - with(p) - jac);
            }
            out.push((format!("loading scale {j} (series {n})"), spread(&diffs)));
        }

        if let Some(c) = s.loading_smoothing_conditional(p0, n) {
            let mut diffs = Vec::new();
            for _ in 0..points {
                let v = jitter_positive(p0.lambda_phi, c.lower, c.upper, &mut rng);
                let mut p = p0.clone();
                p.lambda_phi = v;
                diffs.push(c.ln_kernel(v) - with(p));
            }
            out.push((format!("loading smoothing (series {n})"), spread(&diffs)));
        }
    }

    // Measurement precisions, latent states and mean curves.
    for n in 0..k {
        let c = s.obs_precision_conditional(base, n);
        let mut diffs = Vec::new();
        for _ in 0..points {
            let v = jitter_positive(1.0 / base.sigma2_nu[n], c.lower, c.upper, &mut rng);
            let mut st = base.clone();
            st.sigma2_nu[n] = 1.0 / v;
            diffs.push(c.ln_kernel(v) - collapsed_log_joint(s, &st));
        }
        out.push((format!("measurement precision (series {n})"), spread(&diffs)));
    }
    {
        let dlm = ftsgc_core::model::assemble_dlm(base, &s.spec, &s.basis).unwrap();
        let mut diffs = Vec::new();
        let mut banded = Vec::new();
        for _ in 0..points {
            let mut st = base.clone();
            for a in st.alpha.iter_mut() {
                for v in a.iter_mut() {
                    *v += 0.02 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let alpha: Vec<DVector<f64>> = st.alpha.iter().map(|a| DVector::from_column_slice(a)).collect();
            diffs.push(smoother_log_density(s.data, &dlm, &alpha).unwrap() - collapsed_log_joint(s, &st));
            banded.push(PrecisionSmoother::new(s.data, &dlm).unwrap().ln_pdf(&alpha) - collapsed_log_joint(s, &st));
        }
        out.push(("latent states".into(), spread(&diffs)));
        out.push(("latent states (banded)".into(), spread(&banded)));
    }
    for n in 0..k {
        let c = s.mean_conditional(base, n).unwrap();
        let mut diffs = Vec::new();
        for _ in 0..points {
            let x = c.sample(&mut rng);
            let mut st = base.clone();
            st.mean[n].theta_mu = x.iter().copied().collect();
            diffs.push(c.ln_pdf(&x) - collapsed_log_joint(s, &st));
        }
        out.push((format!("mean coefficients (series {n})"), spread(&diffs)));
        if let Some(c) = s.mean_smoothing_conditional(base, n) {
            let mut diffs = Vec::new();
            for _ in 0..points {
                let v = jitter_positive(base.mean[n].lambda_mu, c.lower, c.upper, &mut rng);
                let mut st = base.clone();
                st.mean[n].lambda_mu = v;
                diffs.push(c.ln_kernel(v) - collapsed_log_joint(s, &st));
            }
            out.push((format!("mean smoothing (series {n})"), spread(&diffs)));
        }
    }
    out
}

/// A random state-space model over series of the given grid sizes. Blocks
/// of the transition only couple series inside the same group.
pub fn random_dlm(rng: &mut ChaCha8Rng, sizes: &[usize], groups: Vec<Vec<usize>>) -> Dlm {
    let mut offsets = vec![0];
    for s in sizes {
        offsets.push(offsets.last().unwrap() + s);
    }
    let n = offsets[sizes.len()];
    let mut transition = DMatrix::zeros(n, n);
    for g in &groups {
        for &r in g {
            for &c in g {
                for i in offsets[r]..offsets[r + 1] {
                    for j in offsets[c]..offsets[c + 1] {
                        transition[(i, j)] = rng.gen_range(-0.4..0.4) / n as f64;
                    }
                }
            }
        }
    }
    let mut state_cov = DMatrix::zeros(n, n);
    for (s, &m) in sizes.iter().enumerate() {
        let a = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
        let block = &a * a.transpose() * 0.3 + DMatrix::identity(m, m) * 0.05;
        state_cov.view_mut((offsets[s], offsets[s]), (m, m)).copy_from(&block);
    }
    Dlm {
        offsets,
        mu: DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
        transition,
        state_cov,
        obs_var: sizes.iter().map(|_| rng.gen_range(0.02..0.3)).collect(),
        groups,
    }
}

/// Random curves on equispaced grids; with `sparse`, each point is kept with
/// probability 0.6 (possibly leaving a curve empty).
pub fn random_sample(rng: &mut ChaCha8Rng, sizes: &[usize], t_len: usize, sparse: bool) -> FunctionalSample {
    let grids: Vec<Vec<f64>> = sizes.iter().map(|&m| (0..m).map(|i| i as f64 / (m - 1) as f64).collect()).collect();
    let grid = make_grid(&grids).unwrap();
    let data = (0..t_len)
        .map(|_| {
            sizes
                .iter()
                .enumerate()
                .map(|(n, &m)| {
                    let keep: Vec<usize> = (0..m).filter(|_| !sparse || rng.gen::<f64>() < 0.6).collect();
                    (keep.iter().map(|&i| grids[n][i]).collect(), keep.iter().map(|_| rng.gen_range(-2.0..2.0)).collect())
                })
                .collect()
        })
        .collect();
    FunctionalSample::from_points(grid, sizes.iter().map(|s| format!("s{s}")).collect(), (0..t_len as i64).collect(), data).unwrap()
}

/// `log p(y)` from the dense covariance of every observed value, with
/// `α_0 ~ N(0, K)` and `α_t = G α_{t-1} + ε_t`.
pub fn dense_loglik(data: &FunctionalSample, dlm: &Dlm) -> f64 {
    let n = dlm.offsets[dlm.offsets.len() - 1];
    let t_len = data.len();
    // Stacked states are L ε with L[t][s] = G^{t-s}.
    let mut powers = vec![DMatrix::identity(n, n)];
    for k in 1..t_len {
        powers.push(&dlm.transition * &powers[k - 1]);
    }
    let mut l = DMatrix::zeros(n * t_len, n * t_len);
    let mut k_big = DMatrix::zeros(n * t_len, n * t_len);
    for t in 0..t_len {
        k_big.view_mut((t * n, t * n), (n, n)).copy_from(&dlm.state_cov);
        for s in 0..=t {
            l.view_mut((t * n, s * n), (n, n)).copy_from(&powers[t - s]);
        }
    }
    let cov_states = &l * k_big * l.transpose();
    let mut rows = Vec::new();
    let mut resid = Vec::new();
    let mut noise = Vec::new();
    for t in 0..t_len {
        for k in 0..data.series_count() {
            let obs = &data.observations[t][k];
            for (&c, &y) in obs.incidence.columns.iter().zip(&obs.values) {
                let i = dlm.offsets[k] + c;
                rows.push(t * n + i);
                resid.push(y - dlm.mu[i]);
                noise.push(dlm.obs_var[k]);
            }
        }
    }
    let d = rows.len();
    let cov = DMatrix::from_fn(d, d, |a, b| cov_states[(rows[a], rows[b])] + if a == b { noise[a] } else { 0.0 });
    ln_mvn(&DVector::from_vec(resid), &DVector::zeros(d), &cov)
}
