//! Small dense linear-algebra helpers shared by the samplers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// Relative jitter added to the diagonal before every Cholesky factorization.
pub const JITTER: f64 = 1e-10;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factor of `m + JITTER * scale * I`, where `scale` is the mean
/// absolute diagonal entry (or 1 for an all-zero diagonal).
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    if n == 0 {
        return Cholesky::new(m.clone());
    }
    let mean_diag = (0..n).map(|i| m[(i, i)].abs()).sum::<f64>() / n as f64;
    let scale = if mean_diag > 0.0 && mean_diag.is_finite() {
        mean_diag
    } else {
        1.0
    };
    let mut a = m.clone();
    for i in 0..n {
        a[(i, i)] += JITTER * scale;
    }
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(a)
}

pub fn log_det_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draw from `N(Q^{-1} b, Q^{-1})` given the precision `Q` and the linear term
/// `b`. Returns `None` when `Q` is not positive definite.
pub fn sample_from_precision<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    linear: &DVector<f64>,
    rng: &mut R,
) -> Option<DVector<f64>> {
    let chol = cholesky_jittered(precision)?;
    let mean = chol.solve(linear);
    let z = standard_normal_vector(linear.len(), rng);
    // L L' x = ... ; x = L'^{-1} z has covariance Q^{-1}.
    let dev = chol.l_dirty().tr_solve_lower_triangular(&z)?;
    Some(mean + dev)
}

/// Mean and log-density of the Gaussian `N(Q^{-1} b, Q^{-1})`.
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianConditional {
    pub fn from_precision(precision: DMatrix<f64>, linear: &DVector<f64>) -> Option<Self> {
        let chol = cholesky_jittered(&precision)?;
        let mean = chol.solve(linear);
        Some(Self {
            mean,
            precision,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = standard_normal_vector(self.dim(), rng);
        let dev = self
            .chol
            .l()
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has a positive diagonal");
        &self.mean + dev
    }

    pub fn ln_pdf(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let q = (self.chol.l().transpose() * &d).norm_squared();
        let n = self.dim() as f64;
        -0.5 * n * (2.0 * std::f64::consts::PI).ln() + 0.5 * log_det_chol(&self.chol) - 0.5 * q
    }
}

/// Log-density of `N(mean, cov)` evaluated at `x`.
pub fn mvn_ln_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<f64> {
    let chol = cholesky_jittered(cov)?;
    let d = x - mean;
    let w = chol.l().solve_lower_triangular(&d)?;
    let n = x.len() as f64;
    Some(-0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det_chol(&chol) - 0.5 * w.norm_squared())
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    // Summation in sorted order keeps the reduction independent of input order.
    let mut terms: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    max + terms.iter().sum::<f64>().ln()
}
