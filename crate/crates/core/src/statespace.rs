//! Kalman filtering, forward-filter backward-sample and forecasting for the
//! state-space form assembled by [`crate::model::assemble_dlm`].
//!
//! Groups of series that evolve independently (no active cross block) are
//! filtered separately; the joint likelihood is the sum over groups.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, log_det_chol, standard_normal_vector, symmetrize};
use crate::model::{Dlm, FunctionalSample};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// How the first state of a filter pass is distributed.
#[derive(Debug, Clone, Copy)]
pub enum Start<'a> {
    /// `α_1 ~ N(0, K_ε)`.
    Stationary,
    /// The state just before the first time is known exactly, so
    /// `α_1 ~ N(G α_0, K_ε)`.
    After(&'a DVector<f64>),
}

/// Moments kept from the forward pass at one time.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub predicted_mean: DVector<f64>,
    pub predicted_cov: DMatrix<f64>,
    pub filtered_mean: DVector<f64>,
    pub filtered_cov: DMatrix<f64>,
}

/// Forward pass over one group of series.
#[derive(Debug, Clone)]
pub struct GroupFilter {
    /// Stacked state indices of the group inside the full state.
    pub indices: Vec<usize>,
    pub transition: DMatrix<f64>,
    pub steps: Vec<FilterStep>,
    pub loglik: f64,
}

/// Observation rows at one time for one group: local state index, value
/// minus mean, noise variance.
fn observed_rows(data: &FunctionalSample, dlm: &Dlm, group: &[usize], t: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut idx = Vec::new();
    let mut resid = Vec::new();
    let mut var = Vec::new();
    let mut local = 0;
    for &n in group {
        let obs = &data.observations[t][n];
        let base = dlm.offsets[n];
        for (&c, &y) in obs.incidence.columns.iter().zip(&obs.values) {
            idx.push(local + c);
            resid.push(y - dlm.mu[base + c]);
            var.push(dlm.obs_var[n]);
        }
        local += dlm.offsets[n + 1] - base;
    }
    (idx, resid, var)
}

fn submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

/// Run the Kalman filter for one group of series.
pub fn filter_group(data: &FunctionalSample, dlm: &Dlm, group: &[usize], start: Start<'_>) -> Result<GroupFilter> {
    let indices = dlm.group_indices(group);
    let g = submatrix(&dlm.transition, &indices);
    let k_eps = submatrix(&dlm.state_cov, &indices);
    let dim = indices.len();
    let mut steps: Vec<FilterStep> = Vec::with_capacity(data.len());
    let mut loglik = 0.0;
    for t in 0..data.len() {
        let (a, mut p) = match (t, start) {
            (0, Start::Stationary) => (DVector::zeros(dim), k_eps.clone()),
            (0, Start::After(alpha0)) => {
                let a0 = DVector::from_iterator(dim, indices.iter().map(|&i| alpha0[i]));
                (&g * a0, k_eps.clone())
            }
            _ => {
                let prev = &steps[t - 1];
                let gc = &g * &prev.filtered_cov;
                (&g * &prev.filtered_mean, gc * g.transpose() + &k_eps)
            }
        };
        symmetrize(&mut p);
        let (idx, resid, var) = observed_rows(data, dlm, group, t);
        let (m, c) = if idx.is_empty() {
            (a.clone(), p.clone())
        } else {
            let k = idx.len();
            let mut f = submatrix(&p, &idx);
            for i in 0..k {
                f[(i, i)] += var[i];
            }
            let chol = cholesky_jittered(&f).ok_or(Error::NumericalBreakdown { op: "filter", t })?;
            let v = DVector::from_iterator(k, idx.iter().zip(&resid).map(|(&i, r)| r - a[i]));
            let finv_v = chol.solve(&v);
            loglik += -0.5 * (k as f64 * LN_2PI + log_det_chol(&chol) + v.dot(&finv_v));
            // P Z' and the gain K = P Z' F^{-1}.
            let pz = DMatrix::from_fn(dim, k, |r, j| p[(r, idx[j])]);
            let gain = chol.solve(&pz.transpose()).transpose();
            let m = &a + &pz * &finv_v;
            // Joseph form, expanded: P - K Z P - P Z' K' + K F K'.
            let kzp = &gain * pz.transpose();
            let kfk = &gain * (&f * gain.transpose());
            let mut c = &p - &kzp - kzp.transpose() + kfk;
            symmetrize(&mut c);
            (m, c)
        };
        if !loglik.is_finite() {
            return Err(Error::NumericalBreakdown { op: "filter", t });
        }
        steps.push(FilterStep {
            predicted_mean: a,
            predicted_cov: p,
            filtered_mean: m,
            filtered_cov: c,
        });
    }
    Ok(GroupFilter {
        indices,
        transition: g,
        steps,
        loglik,
    })
}

/// `log p(y_{1:T} | Θ)` with the states integrated out.
pub fn loglik(data: &FunctionalSample, dlm: &Dlm) -> Result<f64> {
    let mut total = 0.0;
    for group in &dlm.groups {
        total += filter_group(data, dlm, group, Start::Stationary)?.loglik;
    }
    Ok(total)
}

fn sample_gaussian<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
    t: usize,
) -> Result<DVector<f64>> {
    let chol = cholesky_jittered(cov).ok_or(Error::NumericalBreakdown { op: "ffbs", t })?;
    let z = standard_normal_vector(mean.len(), rng);
    Ok(mean + chol.l_dirty().lower_triangle() * z)
}

/// Backward sampling pass for one filtered group; writes into `alpha`.
fn backward_sample<R: Rng + ?Sized>(f: &GroupFilter, alpha: &mut [DVector<f64>], rng: &mut R) -> Result<()> {
    let t_len = f.steps.len();
    let last = &f.steps[t_len - 1];
    let mut next = sample_gaussian(&last.filtered_mean, &last.filtered_cov, rng, t_len - 1)?;
    write_group(&mut alpha[t_len - 1], &f.indices, &next);
    for t in (0..t_len - 1).rev() {
        let (mean, cov) = backward_moments(f, t, &next)?;
        next = sample_gaussian(&mean, &cov, rng, t)?;
        write_group(&mut alpha[t], &f.indices, &next);
    }
    Ok(())
}

/// Log-density of a full trajectory under the joint conditional that
/// [`ffbs`] samples from.
pub fn smoother_log_density(data: &FunctionalSample, dlm: &Dlm, alpha: &[DVector<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for group in &dlm.groups {
        let f = filter_group(data, dlm, group, Start::Stationary)?;
        let pick = |t: usize| DVector::from_iterator(f.indices.len(), f.indices.iter().map(|&i| alpha[t][i]));
        let t_len = f.steps.len();
        let last = &f.steps[t_len - 1];
        total += crate::linalg::mvn_ln_pdf(&pick(t_len - 1), &last.filtered_mean, &last.filtered_cov)
            .ok_or(Error::NumericalBreakdown { op: "smoother_log_density", t: t_len - 1 })?;
        for t in (0..t_len - 1).rev() {
            let (mean, cov) = backward_moments(&f, t, &pick(t + 1))?;
            total += crate::linalg::mvn_ln_pdf(&pick(t), &mean, &cov)
                .ok_or(Error::NumericalBreakdown { op: "smoother_log_density", t })?;
        }
    }
    Ok(total)
}

/// Moments of `α_t | α_{t+1}, y_{1:t}`.
fn backward_moments(f: &GroupFilter, t: usize, next: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let s = &f.steps[t];
    let chol: Cholesky<f64, Dyn> = cholesky_jittered(&f.steps[t + 1].predicted_cov)
        .ok_or(Error::NumericalBreakdown { op: "ffbs", t: t + 1 })?;
    // J = C_t G' P_{t+1}^{-1}.
    let cg = &s.filtered_cov * f.transition.transpose();
    let j = chol.solve(&cg.transpose()).transpose();
    let mean = &s.filtered_mean + &j * (next - &f.steps[t + 1].predicted_mean);
    let mut cov = &s.filtered_cov - &j * cg.transpose();
    symmetrize(&mut cov);
    Ok((mean, cov))
}

fn write_group(dst: &mut DVector<f64>, indices: &[usize], values: &DVector<f64>) {
    for (&i, v) in indices.iter().zip(values.iter()) {
        dst[i] = *v;
    }
}

/// A draw of `α_{1:T}` from its joint conditional given the data, together
/// with the log-likelihood computed on the way.
pub fn ffbs<R: Rng + ?Sized>(data: &FunctionalSample, dlm: &Dlm, rng: &mut R) -> Result<(Vec<DVector<f64>>, f64)> {
    let mut alpha = vec![DVector::zeros(dlm.state_dim()); data.len()];
    let mut total = 0.0;
    for group in &dlm.groups {
        let f = filter_group(data, dlm, group, Start::Stationary)?;
        total += f.loglik;
        backward_sample(&f, &mut alpha, rng)?;
    }
    Ok((alpha, total))
}

/// Predictive curves from one posterior draw: `h` steps of the evolution
/// equation from `alpha_last`, each step adding an innovation draw.
pub fn forecast_path<R: Rng + ?Sized>(
    dlm: &Dlm,
    alpha_last: &DVector<f64>,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let chol = cholesky_jittered(&dlm.state_cov).ok_or(Error::NumericalBreakdown { op: "forecast", t: 0 })?;
    let l = chol.l();
    let mut a = alpha_last.clone();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let noise = &l * standard_normal_vector(a.len(), rng);
        a = &dlm.transition * a + noise;
        out.push(&dlm.mu + &a);
    }
    Ok(out)
}

/// Pointwise summary of predictive curves across posterior draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// `paths[d][h-1]`: curve of draw `d` at horizon `h`.
    pub paths: Vec<Vec<DVector<f64>>>,
    pub mean: Vec<DVector<f64>>,
    pub sd: Vec<DVector<f64>>,
}

/// Forecast from several posterior draws, each given as its assembled DLM and
/// final latent state.
pub fn forecast<R: Rng + ?Sized>(draws: &[(Dlm, DVector<f64>)], horizon: usize, rng: &mut R) -> Result<Forecast> {
    if horizon == 0 || draws.is_empty() {
        return Err(Error::config("statespace", "forecast", "need h >= 1 and at least one draw"));
    }
    let paths = draws
        .iter()
        .map(|(dlm, a)| forecast_path(dlm, a, horizon, rng))
        .collect::<Result<Vec<_>>>()?;
    let n = paths.len() as f64;
    let dim = draws[0].1.len();
    let mut mean = Vec::with_capacity(horizon);
    let mut sd = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let m = paths.iter().fold(DVector::zeros(dim), |acc, p| acc + &p[h]) / n;
        let v = paths
            .iter()
            .fold(DVector::zeros(dim), |acc, p| acc + (&p[h] - &m).map(|x| x * x))
            / n;
        mean.push(m);
        sd.push(v.map(f64::sqrt));
    }
    Ok(Forecast { paths, mean, sd })
}

/// Predictive means `μ + G^h E[α_{o} | y up to o]` for every forecast origin
/// `o` inside `future`, starting from a known state just before `future`.
///
/// Returns `out[h_index][o]`, the predicted curve for `future` time
/// `o + h - 1`, for every origin with `o + h <= future.len()`.
pub fn rolling_forecast_means(
    dlm: &Dlm,
    alpha_last: &DVector<f64>,
    future: &FunctionalSample,
    horizons: &[usize],
) -> Result<Vec<Vec<DVector<f64>>>> {
    let dim = dlm.state_dim();
    let h_len = future.len();
    // Filtered means after assimilating 0..H future times.
    let mut origins = vec![alpha_last.clone()];
    let mut filtered = vec![DVector::zeros(dim); h_len];
    for group in &dlm.groups {
        let f = filter_group(future, dlm, group, Start::After(alpha_last))?;
        for (t, s) in f.steps.iter().enumerate() {
            write_group(&mut filtered[t], &f.indices, &s.filtered_mean);
        }
    }
    origins.extend(filtered);
    let mut out = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let mut row = Vec::new();
        for o in 0..h_len {
            if o + h > h_len {
                break;
            }
            let mut a = origins[o].clone();
            for _ in 0..h {
                a = &dlm.transition * a;
            }
            row.push(&dlm.mu + a);
        }
        out.push(row);
    }
    Ok(out)
}

/// Banded Cholesky factor of the joint conditional precision of one group's
/// states `α_{1:T}` given the data.
///
/// With `A = K_ε^{-1}`, the precision is block tridiagonal: diagonal blocks
/// `A + G'AG + Z_t'R^{-1}Z_t` (without `G'AG` at the last time) and
/// off-diagonal blocks `−AG`. Its factor `L` is block lower bidiagonal.
#[derive(Debug, Clone)]
struct BandedGroup {
    indices: Vec<usize>,
    /// `L_tt`, lower triangular.
    diag: Vec<DMatrix<f64>>,
    /// `L_{t+1,t}` for `t = 0..T-1`.
    sub: Vec<DMatrix<f64>>,
    mean: Vec<DVector<f64>>,
    log_det_precision: f64,
    loglik: f64,
}

/// Exact joint conditional of the latent states, computed through the
/// block-tridiagonal precision instead of a filter pass. Gives the same
/// distribution and likelihood as [`ffbs`] at lower cost for large states.
#[derive(Debug, Clone)]
pub struct PrecisionSmoother {
    groups: Vec<BandedGroup>,
    t_len: usize,
    dim: usize,
}

fn lower_solve(l: &DMatrix<f64>, b: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
    l.solve_lower_triangular(b).ok_or(Error::NumericalBreakdown { op: "precision_smoother", t })
}

fn upper_solve(l: &DMatrix<f64>, b: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
    l.tr_solve_lower_triangular(b).ok_or(Error::NumericalBreakdown { op: "precision_smoother", t })
}

fn band_group(data: &FunctionalSample, dlm: &Dlm, group: &[usize]) -> Result<BandedGroup> {
    let brk = |t| Error::NumericalBreakdown { op: "precision_smoother", t };
    let indices = dlm.group_indices(group);
    let g = submatrix(&dlm.transition, &indices);
    let k_eps = submatrix(&dlm.state_cov, &indices);
    let dim = indices.len();
    let t_len = data.len();
    let k_chol = cholesky_jittered(&k_eps).ok_or(brk(0))?;
    let log_det_k = log_det_chol(&k_chol);
    let a = k_chol.inverse();
    let gta = g.transpose() * &a;
    let gtag = &gta * &g;
    // Observation precision and linear term per time.
    let mut obs_prec = Vec::with_capacity(t_len);
    let mut linear = Vec::with_capacity(t_len);
    let mut obs_ll_parts = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let (idx, resid, var) = observed_rows(data, dlm, group, t);
        let mut d = DVector::<f64>::zeros(dim);
        let mut b = DVector::<f64>::zeros(dim);
        for ((&i, r), v) in idx.iter().zip(&resid).zip(&var) {
            d[i] += 1.0 / v;
            b[i] += r / v;
        }
        obs_prec.push(d);
        linear.push(b);
        obs_ll_parts.push((idx, resid, var));
    }
    let mut diag: Vec<DMatrix<f64>> = Vec::with_capacity(t_len);
    let mut sub: Vec<DMatrix<f64>> = Vec::with_capacity(t_len.saturating_sub(1));
    let mut log_det_precision = 0.0;
    for t in 0..t_len {
        let mut q = a.clone();
        if t + 1 < t_len {
            q += &gtag;
        }
        for i in 0..dim {
            q[(i, i)] += obs_prec[t][i];
        }
        if t > 0 {
            // L_{t,t-1} = −AG L_{t-1}^{-T}, so L_{t,t-1}' = −L_{t-1}^{-1} G'A.
            let xt = -diag[t - 1].solve_lower_triangular(&gta).ok_or(brk(t))?;
            q -= xt.transpose() * &xt;
            sub.push(xt.transpose());
        }
        symmetrize(&mut q);
        let chol = cholesky_jittered(&q).ok_or(brk(t))?;
        log_det_precision += log_det_chol(&chol);
        diag.push(chol.unpack());
    }
    // Mean: L w = b, then L' m = w.
    let mut w: Vec<DVector<f64>> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut r = linear[t].clone();
        if t > 0 {
            r -= &sub[t - 1] * &w[t - 1];
        }
        w.push(lower_solve(&diag[t], &r, t)?);
    }
    let mut mean = vec![DVector::zeros(dim); t_len];
    for t in (0..t_len).rev() {
        let mut r = w[t].clone();
        if t + 1 < t_len {
            r -= sub[t].transpose() * &mean[t + 1];
        }
        mean[t] = upper_solve(&diag[t], &r, t)?;
    }
    // log p(y) = log p(y | m) + log p(m) − log p(m | y), at the mean m.
    let mut ll = 0.0;
    for (t, (idx, resid, var)) in obs_ll_parts.iter().enumerate() {
        for ((&i, r), v) in idx.iter().zip(resid).zip(var) {
            let e = r - mean[t][i];
            ll -= 0.5 * (LN_2PI + v.ln() + e * e / v);
        }
    }
    for t in 0..t_len {
        let innov = if t == 0 { mean[0].clone() } else { &mean[t] - &g * &mean[t - 1] };
        ll -= 0.5 * (dim as f64 * LN_2PI + log_det_k + innov.dot(&(&a * &innov)));
    }
    ll -= -0.5 * (t_len * dim) as f64 * LN_2PI + 0.5 * log_det_precision;
    if !ll.is_finite() {
        return Err(brk(t_len.saturating_sub(1)));
    }
    Ok(BandedGroup {
        indices,
        diag,
        sub,
        mean,
        log_det_precision,
        loglik: ll,
    })
}

impl PrecisionSmoother {
    pub fn new(data: &FunctionalSample, dlm: &Dlm) -> Result<Self> {
        let groups = dlm
            .groups
            .iter()
            .map(|g| band_group(data, dlm, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            groups,
            t_len: data.len(),
            dim: dlm.state_dim(),
        })
    }

    /// `log p(y_{1:T} | Θ)`.
    pub fn loglik(&self) -> f64 {
        self.groups.iter().map(|g| g.loglik).sum()
    }

    /// Conditional mean of the states.
    pub fn mean(&self) -> Vec<DVector<f64>> {
        let mut out = vec![DVector::zeros(self.dim); self.t_len];
        for g in &self.groups {
            for (t, m) in g.mean.iter().enumerate() {
                write_group(&mut out[t], &g.indices, m);
            }
        }
        out
    }

    /// One joint draw of `α_{1:T}`: `m + L^{-T} z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let mut out = vec![DVector::zeros(self.dim); self.t_len];
        for g in &self.groups {
            let dim = g.indices.len();
            let mut next: Option<DVector<f64>> = None;
            for t in (0..self.t_len).rev() {
                let mut r = standard_normal_vector(dim, rng);
                if let Some(n) = &next {
                    r -= g.sub[t].transpose() * n;
                }
                let dev = upper_solve(&g.diag[t], &r, t)?;
                write_group(&mut out[t], &g.indices, &(&g.mean[t] + &dev));
                next = Some(dev);
            }
        }
        Ok(out)
    }

    /// Log-density of a trajectory under the joint conditional.
    pub fn ln_pdf(&self, alpha: &[DVector<f64>]) -> f64 {
        let mut total = 0.0;
        for g in &self.groups {
            let dim = g.indices.len();
            let dev: Vec<DVector<f64>> = (0..self.t_len)
                .map(|t| DVector::from_iterator(dim, g.indices.iter().map(|&i| alpha[t][i])) - &g.mean[t])
                .collect();
            let mut quad = 0.0;
            for t in 0..self.t_len {
                let mut v = g.diag[t].transpose() * &dev[t];
                if t + 1 < self.t_len {
                    v += g.sub[t].transpose() * &dev[t + 1];
                }
                quad += v.norm_squared();
            }
            total += -0.5 * (self.t_len * dim) as f64 * LN_2PI + 0.5 * g.log_det_precision - 0.5 * quad;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::linalg::mvn_ln_pdf;
    use crate::model::{Dlm, FunctionalSample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_dlm(rng: &mut ChaCha8Rng, sizes: &[usize], groups: Vec<Vec<usize>>) -> Dlm {
        let mut offsets = vec![0];
        for s in sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let n = offsets[sizes.len()];
        let u = |rng: &mut ChaCha8Rng| rng.gen_range(-1.0..1.0);
        let mut transition = DMatrix::from_fn(n, n, |_, _| 0.0);
        let mut state_cov = DMatrix::zeros(n, n);
        for (a, ga) in groups.iter().enumerate() {
            let _ = a;
            for &r in ga {
                for &c in ga {
                    for i in offsets[r]..offsets[r + 1] {
                        for j in offsets[c]..offsets[c + 1] {
                            transition[(i, j)] = 0.3 * u(rng) / n as f64;
                        }
                    }
                }
            }
        }
        for s in 0..sizes.len() {
            let m = sizes[s];
            let a = DMatrix::from_fn(m, m, |_, _| u(rng));
            let block = &a * a.transpose() * 0.2 + DMatrix::identity(m, m) * 0.1;
            state_cov.view_mut((offsets[s], offsets[s]), (m, m)).copy_from(&block);
        }
        Dlm {
            offsets: offsets.clone(),
            mu: DVector::from_fn(n, |_, _| u(rng)),
            transition,
            state_cov,
            obs_var: sizes.iter().map(|_| 0.05 + 0.2 * rng.gen::<f64>()).collect(),
            groups,
        }
    }

    fn random_data(rng: &mut ChaCha8Rng, sizes: &[usize], t: usize, sparse: bool) -> FunctionalSample {
        let grid = make_grid(
            &sizes
                .iter()
                .map(|&m| (0..m.max(3)).map(|i| i as f64 / (m.max(3) - 1) as f64).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let data = (0..t)
            .map(|_| {
                sizes
                    .iter()
                    .enumerate()
                    .map(|(n, &m)| {
                        let pts = &grid.series[n].points;
                        let keep: Vec<usize> = (0..m).filter(|_| !sparse || rng.gen::<f64>() < 0.6).collect();
                        (
                            keep.iter().map(|&i| pts[i]).collect(),
                            keep.iter().map(|_| rng.gen_range(-2.0..2.0)).collect(),
                        )
                    })
                    .collect()
            })
            .collect();
        FunctionalSample::from_points(
            grid,
            sizes.iter().map(|s| s.to_string()).collect(),
            (1..=t as i64).collect(),
            data,
        )
        .unwrap()
    }

    /// Dense joint covariance of the stacked observations.
    fn dense_loglik(data: &FunctionalSample, dlm: &Dlm) -> f64 {
        let n = dlm.state_dim();
        let t_len = data.len();
        // Cov(α_s, α_t) = G^{t-s} Var(α_s) for t >= s.
        let mut var = vec![dlm.state_cov.clone()];
        for t in 1..t_len {
            let v = &dlm.transition * &var[t - 1] * dlm.transition.transpose() + &dlm.state_cov;
            var.push(v);
        }
        let cov_states = |s: usize, t: usize| -> DMatrix<f64> {
            let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
            let mut c = var[lo].clone();
            for _ in lo..hi {
                c = &dlm.transition * c;
            }
            if s <= t {
                c.transpose()
            } else {
                c
            }
        };
        let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
        for t in 0..t_len {
            for k in 0..data.series_count() {
                let obs = &data.observations[t][k];
                for (&c, &y) in obs.incidence.columns.iter().zip(&obs.values) {
                    let i = dlm.offsets[k] + c;
                    rows.push((t, i, y - dlm.mu[i], dlm.obs_var[k]));
                }
            }
        }
        let _ = n;
        let dim = rows.len();
        let mut cov = DMatrix::zeros(dim, dim);
        for a in 0..dim {
            for b in 0..dim {
                let (ta, ia, _, va) = rows[a];
                let (tb, ib, _, _) = rows[b];
                cov[(a, b)] = cov_states(ta, tb)[(ia, ib)] + if a == b { va } else { 0.0 };
            }
        }
        let y = DVector::from_iterator(dim, rows.iter().map(|r| r.2));
        mvn_ln_pdf(&y, &DVector::zeros(dim), &cov).unwrap()
    }

    #[test]
    fn kalman_matches_dense_on_tiny_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dlm = random_dlm(&mut rng, &[3], vec![vec![0]]);
        let data = random_data(&mut rng, &[3], 3, false);
        let k = loglik(&data, &dlm).unwrap();
        let d = dense_loglik(&data, &dlm);
        assert!((k - d).abs() < 1e-8 * d.abs().max(1.0), "{k} vs {d}");
    }

    #[test]
    fn kalman_matches_dense_with_groups_and_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..20 {
            let groups = if case % 2 == 0 { vec![vec![0, 1]] } else { vec![vec![0], vec![1]] };
            let dlm = random_dlm(&mut rng, &[4, 3], groups);
            let data = random_data(&mut rng, &[4, 3], 4, true);
            let k = loglik(&data, &dlm).unwrap();
            let d = dense_loglik(&data, &dlm);
            assert!((k - d).abs() < 1e-8 * d.abs().max(1.0), "case {case}: {k} vs {d}");
        }
    }

    #[test]
    fn no_dynamics_gives_independent_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut dlm = random_dlm(&mut rng, &[3], vec![vec![0]]);
        dlm.transition.fill(0.0);
        dlm.mu.fill(0.0);
        let data = random_data(&mut rng, &[3], 4, false);
        let mut cov = dlm.state_cov.clone();
        for i in 0..3 {
            cov[(i, i)] += dlm.obs_var[0];
        }
        let expect: f64 = (0..4)
            .map(|t| mvn_ln_pdf(&DVector::from_vec(data.observations[t][0].values.clone()), &DVector::zeros(3), &cov).unwrap())
            .sum();
        assert!((loglik(&data, &dlm).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn inflated_noise_lowers_likelihood_of_noiseless_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut dlm = random_dlm(&mut rng, &[3], vec![vec![0]]);
        let data = {
            // Data at the mode: the stationary prior mean μ.
            let curves: Vec<Vec<Vec<f64>>> = (0..4).map(|_| vec![dlm.mu.as_slice().to_vec()]).collect();
            FunctionalSample::from_dense(make_grid(&[vec![0.0, 0.5, 1.0]]).unwrap(), vec!["y".into()], &curves).unwrap()
        };
        let base = loglik(&data, &dlm).unwrap();
        dlm.obs_var[0] *= 2.0;
        assert!(loglik(&data, &dlm).unwrap() < base);
    }

    #[test]
    fn missing_time_equals_prediction_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dlm = random_dlm(&mut rng, &[3], vec![vec![0]]);
        let mut data = random_data(&mut rng, &[3], 4, false);
        data.observations[2][0].values.clear();
        data.observations[2][0].incidence.columns.clear();
        let k = loglik(&data, &dlm).unwrap();
        assert!((k - dense_loglik(&data, &dlm)).abs() < 1e-9);
    }

    #[test]
    fn row_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dlm = random_dlm(&mut rng, &[4], vec![vec![0]]);
        let data = random_data(&mut rng, &[4], 3, false);
        let mut perm = data.clone();
        for row in &mut perm.observations {
            row[0].incidence.columns.reverse();
            row[0].values.reverse();
        }
        assert!((loglik(&data, &dlm).unwrap() - loglik(&perm, &dlm).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn near_noiseless_smoother_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut dlm = random_dlm(&mut rng, &[3], vec![vec![0]]);
        dlm.obs_var[0] = 1e-12;
        let data = random_data(&mut rng, &[3], 5, false);
        let (alpha, _) = ffbs(&data, &dlm, &mut rng).unwrap();
        for t in 0..5 {
            for i in 0..3 {
                let target = data.observations[t][0].values[i] - dlm.mu[i];
                assert!((alpha[t][i] - target).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn precision_smoother_agrees_with_the_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..20 {
            let groups = if case % 2 == 0 { vec![vec![0, 1]] } else { vec![vec![0], vec![1]] };
            let dlm = random_dlm(&mut rng, &[4, 3], groups);
            let data = random_data(&mut rng, &[4, 3], 5, case % 3 != 0);
            let ps = PrecisionSmoother::new(&data, &dlm).unwrap();
            let k = loglik(&data, &dlm).unwrap();
            assert!((ps.loglik() - k).abs() < 1e-8 * k.abs().max(1.0), "case {case}: {} vs {k}", ps.loglik());
            let d = dense_loglik(&data, &dlm);
            assert!((ps.loglik() - d).abs() < 1e-8 * d.abs().max(1.0));
            // Same joint conditional: the log-densities agree everywhere.
            for _ in 0..3 {
                let alpha: Vec<DVector<f64>> = (0..5).map(|_| DVector::from_fn(7, |_, _| rng.gen_range(-1.0..1.0))).collect();
                let a = ps.ln_pdf(&alpha);
                let b = smoother_log_density(&data, &dlm, &alpha).unwrap();
                assert!((a - b).abs() < 1e-7 * b.abs().max(1.0), "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn precision_smoother_draws_have_the_smoothing_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dlm = random_dlm(&mut rng, &[3, 2], vec![vec![0, 1]]);
        let data = random_data(&mut rng, &[3, 2], 4, true);
        let ps = PrecisionSmoother::new(&data, &dlm).unwrap();
        let mean = ps.mean();
        // The mean maximizes the density.
        let peak = ps.ln_pdf(&mean);
        let draws = 20_000;
        let mut acc = vec![DVector::zeros(5); 4];
        let mut acc2 = vec![DVector::zeros(5); 4];
        for _ in 0..draws {
            let a = ps.sample(&mut rng).unwrap();
            assert!(ps.ln_pdf(&a) <= peak);
            for t in 0..4 {
                acc[t] += &a[t];
                acc2[t] += a[t].map(|v| v * v);
            }
        }
        for t in 0..4 {
            for i in 0..5 {
                let m = acc[t][i] / draws as f64;
                let v = acc2[t][i] / draws as f64 - m * m;
                let se = (v / draws as f64).sqrt();
                assert!((m - mean[t][i]).abs() < 4.0 * se, "t {t} i {i}");
            }
        }
    }

    #[test]
    fn ffbs_mean_matches_dense_smoother() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dlm3 = random_dlm(&mut rng, &[2], vec![vec![0]]);
        let grid = crate::grid::EvaluationGrid {
            series: vec![crate::grid::SeriesGrid {
                points: vec![0.0, 1.0],
                weights: vec![0.5, 0.5],
                kind: crate::grid::GridKind::Continuous,
            }],
        };
        let data = FunctionalSample::from_points(
            grid,
            vec!["y".into()],
            (1..=5).collect(),
            (0..5)
                .map(|_| vec![(vec![0.0, 1.0], vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])])
                .collect(),
        )
        .unwrap();
        // Dense smoother mean of α_3 by Gaussian conditioning.
        let n = 2;
        let t_len = 5;
        let mut var = vec![dlm3.state_cov.clone()];
        for t in 1..t_len {
            var.push(&dlm3.transition * &var[t - 1] * dlm3.transition.transpose() + &dlm3.state_cov);
        }
        let cov_st = |s: usize, t: usize| {
            let (lo, hi) = (s.min(t), s.max(t));
            let mut c = var[lo].clone();
            for _ in lo..hi {
                c = &dlm3.transition * c;
            }
            if s <= t {
                c.transpose()
            } else {
                c
            }
        };
        let big = n * t_len;
        let mut sa = DMatrix::zeros(big, big);
        for s in 0..t_len {
            for t in 0..t_len {
                sa.view_mut((s * n, t * n), (n, n)).copy_from(&cov_st(s, t));
            }
        }
        let mut sy = sa.clone();
        for i in 0..big {
            sy[(i, i)] += dlm3.obs_var[0];
        }
        let y = DVector::from_iterator(
            big,
            (0..t_len).flat_map(|t| (0..n).map(move |i| (t, i))).map(|(t, i)| data.observations[t][0].values[i] - dlm3.mu[i]),
        );
        let smooth = &sa * sy.clone().try_inverse().unwrap() * &y;
        let post_cov = &sa - &sa * sy.try_inverse().unwrap() * &sa;
        let draws = 20_000;
        let mut acc = DVector::zeros(n);
        for _ in 0..draws {
            let (alpha, _) = ffbs(&data, &dlm3, &mut rng).unwrap();
            acc += &alpha[2];
        }
        let mean = acc / draws as f64;
        for i in 0..n {
            let se = (post_cov[(2 * n + i, 2 * n + i)] / draws as f64).sqrt();
            assert!((mean[i] - smooth[2 * n + i]).abs() < 3.0 * se, "component {i}");
        }
    }

    #[test]
    fn independent_group_draws_ignore_other_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dlm = random_dlm(&mut rng, &[3, 3], vec![vec![0], vec![1]]);
        let data = random_data(&mut rng, &[3, 3], 4, false);
        let mut permuted = data.clone();
        let ys: Vec<Observation> = data.observations.iter().map(|r| r[0].clone()).collect();
        for (t, row) in permuted.observations.iter_mut().enumerate() {
            row[0] = ys[ys.len() - 1 - t].clone();
        }
        // Series 1 comes second, so reseeding gives it the same stream once
        // series 0 has consumed the same number of normals.
        let (a, _) = ffbs(&data, &dlm, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (b, _) = ffbs(&permuted, &dlm, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for t in 0..4 {
            assert_eq!(a[t].rows(3, 3), b[t].rows(3, 3));
        }
    }

    use crate::model::Observation;

    #[test]
    fn zero_kernel_forecast_mean_is_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut dlm = random_dlm(&mut rng, &[3], vec![vec![0]]);
        dlm.transition.fill(0.0);
        let future = random_data(&mut rng, &[3], 2, false);
        let out = rolling_forecast_means(&dlm, &DVector::from_vec(vec![1.0, 2.0, 3.0]), &future, &[1]).unwrap();
        assert_eq!(out[0][0], dlm.mu);
        let fc = forecast(&[(dlm.clone(), DVector::zeros(3))], 1, &mut rng).unwrap();
        assert_eq!(fc.mean.len(), 1);
    }

    #[test]
    fn forecast_variance_grows_with_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dlm = random_dlm(&mut rng, &[4], vec![vec![0]]);
        let draws: Vec<(Dlm, DVector<f64>)> = (0..4000).map(|_| (dlm.clone(), DVector::zeros(4))).collect();
        let fc = forecast(&draws, 5, &mut rng).unwrap();
        // Var_h = Σ_{k<h} G^k K_ε G^k' is nondecreasing; compare the exact
        // traces and check the Monte Carlo ones agree with them.
        let mut v = DMatrix::zeros(4, 4);
        let mut prev = 0.0;
        for h in 0..5 {
            v = &dlm.transition * v * dlm.transition.transpose() + &dlm.state_cov;
            assert!(v.trace() >= prev);
            prev = v.trace();
            let mc: f64 = fc.sd[h].iter().map(|s| s * s).sum();
            assert!((mc - v.trace()).abs() < 0.1 * v.trace());
        }
    }
}
