//! Data containers, parameter state, hypothesis structure and the assembly of
//! the state-space matrices.
//!
//! Series are stacked in index order (response first, then the candidate
//! cause). The latent state at time `t` stacks the grid values of every series.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    self, BasisKind, BasisSet, EvaluationGrid, GridKind, IncidenceMatrix, KernelAxis, SeriesGrid,
    TensorPenalty,
};

/// Lag order of the autoregression.
pub const LAG_ORDER: usize = 1;

/// Prior variance given to unpenalized (polynomial or vector) coefficients.
pub const FLAT_PRIOR_VARIANCE: f64 = 1e8;

/// Values observed for one series at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub incidence: IncidenceMatrix,
    pub values: Vec<f64>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Irregularly observed curves for `K` series over `T` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSample {
    pub grid: EvaluationGrid,
    pub series_names: Vec<String>,
    /// Original time labels, one per time.
    pub time_labels: Vec<i64>,
    /// `observations[t][n]`.
    pub observations: Vec<Vec<Observation>>,
}

impl FunctionalSample {
    /// Build a sample from `(abscissae, values)` pairs per time and series.
    pub fn from_points(
        grid: EvaluationGrid,
        series_names: Vec<String>,
        time_labels: Vec<i64>,
        data: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    ) -> Result<Self> {
        let k = grid.series_count();
        if series_names.len() != k || time_labels.len() != data.len() {
            return Err(Error::shape(
                "model",
                "from_points",
                "series names / time labels do not match the data",
            ));
        }
        let mut observations = Vec::with_capacity(data.len());
        for row in data {
            if row.len() != k {
                return Err(Error::shape(
                    "model",
                    "from_points",
                    format!("expected {k} series per time, found {}", row.len()),
                ));
            }
            let mut obs = Vec::with_capacity(k);
            for (n, (taus, values)) in row.into_iter().enumerate() {
                if taus.len() != values.len() {
                    return Err(Error::shape(
                        "model",
                        "from_points",
                        "abscissae and values differ in length",
                    ));
                }
                obs.push(Observation {
                    incidence: grid::incidence(&grid.series[n], &taus)?,
                    values,
                });
            }
            observations.push(obs);
        }
        Ok(Self {
            grid,
            series_names,
            time_labels,
            observations,
        })
    }

    /// Fully observed curves: `curves[t][n]` holds one value per grid point.
    pub fn from_dense(grid: EvaluationGrid, series_names: Vec<String>, curves: &[Vec<Vec<f64>>]) -> Result<Self> {
        let data = curves
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(n, c)| (grid.series[n].points.clone(), c.clone()))
                    .collect()
            })
            .collect();
        let labels = (1..=curves.len() as i64).collect();
        Self::from_points(grid, series_names, labels, data)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn series_count(&self) -> usize {
        self.grid.series_count()
    }

    pub fn abscissae(&self, t: usize, n: usize) -> Vec<f64> {
        let pts = &self.grid.series[n].points;
        self.observations[t][n].incidence.columns.iter().map(|&c| pts[c]).collect()
    }

    /// Times `range` as a new sample sharing the grid.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            grid: self.grid.clone(),
            series_names: self.series_names.clone(),
            time_labels: self.time_labels[range.clone()].to_vec(),
            observations: self.observations[range].to_vec(),
        }
    }

    /// Sample restricted to the listed series, in the given order.
    pub fn select_series(&self, series: &[usize]) -> Self {
        Self {
            grid: EvaluationGrid {
                series: series.iter().map(|&n| self.grid.series[n].clone()).collect(),
            },
            series_names: series.iter().map(|&n| self.series_names[n].clone()).collect(),
            time_labels: self.time_labels.clone(),
            observations: self
                .observations
                .iter()
                .map(|row| series.iter().map(|&n| row[n].clone()).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Hypothesis {
    /// `Y` depends on its own past and on `X`'s past; `X` on its own past.
    Unrestricted,
    /// Each series depends only on its own past.
    Restricted,
    /// Every block active (general estimation, any `K`).
    Full,
}

/// Which kernel blocks `Ψ_{n,m}` are free parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hypothesis: Hypothesis,
    pub series_count: usize,
    /// Index of the response series `Y`.
    pub response: usize,
    /// Index of the candidate cause `X`.
    pub cause: usize,
    active: Vec<bool>,
}

impl ModelSpec {
    /// Bivariate unrestricted model with `Y` = series 0 and `X` = series 1.
    pub fn unrestricted() -> Self {
        Self {
            hypothesis: Hypothesis::Unrestricted,
            series_count: 2,
            response: 0,
            cause: 1,
            active: vec![true, true, false, true],
        }
    }

    pub fn restricted() -> Self {
        Self {
            hypothesis: Hypothesis::Restricted,
            series_count: 2,
            response: 0,
            cause: 1,
            active: vec![true, false, false, true],
        }
    }

    pub fn full(series_count: usize) -> Self {
        Self {
            hypothesis: Hypothesis::Full,
            series_count,
            response: 0,
            cause: series_count.min(2) - 1,
            active: vec![true; series_count * series_count],
        }
    }

    pub fn for_hypothesis(hypothesis: Hypothesis, series_count: usize) -> Result<Self> {
        match hypothesis {
            Hypothesis::Full => Ok(Self::full(series_count)),
            _ if series_count != 2 => Err(Error::config(
                "model",
                "for_hypothesis",
                format!("causality hypotheses need exactly 2 series, found {series_count}"),
            )),
            Hypothesis::Unrestricted => Ok(Self::unrestricted()),
            Hypothesis::Restricted => Ok(Self::restricted()),
        }
    }

    /// Whether `Ψ_{row,col}` (row series driven by col series) is free.
    pub fn is_active(&self, row: usize, col: usize) -> bool {
        self.active[row * self.series_count + col]
    }

    /// Active blocks in row-major order.
    pub fn active_blocks(&self) -> Vec<(usize, usize)> {
        let k = self.series_count;
        (0..k)
            .flat_map(|r| (0..k).map(move |c| (r, c)))
            .filter(|&(r, c)| self.is_active(r, c))
            .collect()
    }

    /// Connected components of series linked by an active cross block. The
    /// state vector of different components evolves independently.
    pub fn independent_groups(&self) -> Vec<Vec<usize>> {
        let k = self.series_count;
        let mut label: Vec<usize> = (0..k).collect();
        let mut changed = true;
        while changed {
            changed = false;
            for r in 0..k {
                for c in 0..k {
                    if r != c && (self.is_active(r, c) || self.is_active(c, r)) {
                        let m = label[r].min(label[c]);
                        if label[r] != m || label[c] != m {
                            label[r] = m;
                            label[c] = m;
                            changed = true;
                        }
                    }
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for n in 0..k {
            match groups.iter_mut().find(|g| label[g[0]] == label[n]) {
                Some(g) => g.push(n),
                None => groups.push(vec![n]),
            }
        }
        groups
    }
}

/// Innovation factors per series; clamped to the loading basis size.
pub const DEFAULT_FACTOR_COUNT: usize = 4;

/// Basis dimensions. `None` selects the default for the series' grid size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisDims {
    pub j_mu: Option<usize>,
    pub j_phi: Option<usize>,
    pub j_psi: usize,
    pub j_eps: usize,
}

impl Default for BasisDims {
    fn default() -> Self {
        Self {
            j_mu: None,
            j_phi: None,
            j_psi: grid::DEFAULT_KERNEL_BASIS_DIM,
            j_eps: DEFAULT_FACTOR_COUNT,
        }
    }
}

/// A curve basis plus the number of leading coefficients that are left
/// unpenalized (given the flat `N(0, 10^8)` prior).
#[derive(Debug, Clone, PartialEq)]
pub struct CurveBasis {
    pub basis: BasisSet,
    pub unpenalized: usize,
}

impl CurveBasis {
    fn new(grid: &SeriesGrid, dim: Option<usize>) -> Result<Self> {
        match grid.kind {
            GridKind::Discrete => {
                let m = grid.len();
                Ok(Self {
                    basis: BasisSet {
                        kind: BasisKind::Identity,
                        evaluation: DMatrix::identity(m, m),
                        penalty: DMatrix::zeros(m, m),
                        knots: Vec::new(),
                    },
                    unpenalized: m,
                })
            }
            GridKind::Continuous => {
                let j = dim.unwrap_or_else(|| grid::default_curve_basis_dim(grid.len()));
                Ok(Self {
                    basis: grid::thin_plate_basis(&grid.points, j)?,
                    unpenalized: 2,
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn penalized(&self) -> usize {
        self.dim() - self.unpenalized
    }

    /// Diagonal of the prior precision for smoothing parameter `lambda`.
    pub fn prior_precision_diag(&self, lambda: f64) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                if j < self.unpenalized {
                    1.0 / FLAT_PRIOR_VARIANCE
                } else {
                    lambda
                }
            })
            .collect()
    }

    pub fn eval(&self, coeffs: &[f64]) -> DVector<f64> {
        &self.basis.evaluation * DVector::from_column_slice(coeffs)
    }
}

/// All per-series bases plus the kernel penalties of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesBasis {
    pub mean: CurveBasis,
    pub loading: CurveBasis,
    pub kernel: KernelAxis,
    pub weights: DVector<f64>,
    pub j_eps: usize,
}

impl SeriesBasis {
    pub fn grid_len(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBasis {
    pub grid: EvaluationGrid,
    pub series: Vec<SeriesBasis>,
    /// `penalties[r * K + c]` for block `(r, c)`.
    pub penalties: Vec<TensorPenalty>,
    pub offsets: Vec<usize>,
}

impl ModelBasis {
    pub fn new(grid: &EvaluationGrid, dims: &BasisDims) -> Result<Self> {
        if dims.j_eps == 0 {
            return Err(Error::config("model", "basis", "J_eps must be at least 1"));
        }
        let mut series = Vec::with_capacity(grid.series_count());
        for s in &grid.series {
            let mean = CurveBasis::new(s, dims.j_mu.map(|j| j.min(s.len())))?;
            let loading = CurveBasis::new(s, dims.j_phi.map(|j| j.min(s.len())))?;
            let kernel = KernelAxis::for_series(s, dims.j_psi.min(s.len()))?;
            series.push(SeriesBasis {
                mean,
                j_eps: dims.j_eps.min(loading.dim()),
                loading,
                kernel,
                weights: DVector::from_column_slice(&s.weights),
            });
        }
        let k = series.len();
        let mut penalties = Vec::with_capacity(k * k);
        for r in 0..k {
            for c in 0..k {
                penalties.push(TensorPenalty::new(&series[r].kernel, &series[c].kernel));
            }
        }
        Ok(Self {
            grid: grid.clone(),
            offsets: grid.offsets(),
            series,
            penalties,
        })
    }

    pub fn series_count(&self) -> usize {
        self.series.len()
    }

    pub fn state_dim(&self) -> usize {
        self.offsets[self.series.len()]
    }

    pub fn penalty(&self, row: usize, col: usize) -> &TensorPenalty {
        &self.penalties[row * self.series.len() + col]
    }

    pub fn block_dim(&self, row: usize, col: usize) -> usize {
        self.series[row].kernel.dim() * self.series[col].kernel.dim()
    }
}

/// Per-series mean curve coefficients and their smoothing parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanParams {
    pub theta_mu: Vec<f64>,
    pub lambda_mu: f64,
}

/// One free kernel block `Ψ_{row,col}` with coefficients `θ = ξ̃ θ̃`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBlock {
    pub row: usize,
    pub col: usize,
    /// `θ_Ψ` in layout `a + b·J_row`, `a` indexing the row series' axis.
    pub theta_psi: Vec<f64>,
    /// Expansion scale `ξ̃_Ψ` (also written `ζ̃_Ψ`).
    pub xi_tilde: f64,
    pub lambda_tilde: f64,
}

impl KernelBlock {
    /// `λ_Ψ = ξ̃^{-2} λ̃`.
    pub fn lambda_psi(&self) -> f64 {
        self.lambda_tilde / (self.xi_tilde * self.xi_tilde)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub blocks: Vec<KernelBlock>,
    pub kappa: f64,
}

impl KernelParams {
    pub fn block(&self, row: usize, col: usize) -> Option<&KernelBlock> {
        self.blocks.iter().find(|b| b.row == row && b.col == col)
    }
}

/// Factor decomposition `ε_t = Φ e_t + η_t` of one series' innovation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationParams {
    /// `Ξ`, column-major `J_φ × J_ε`; loading curves are `Φ = B_φ Ξ`.
    pub xi: Vec<f64>,
    pub j_phi: usize,
    pub j_eps: usize,
    /// `e_t`, one row of `J_ε` factors per time.
    pub factors: Vec<Vec<f64>>,
    /// `σ_j²`, decreasing in `j`.
    pub sigma2_factor: Vec<f64>,
    pub sigma2_eta: f64,
    pub lambda_phi: f64,
}

impl InnovationParams {
    pub fn xi_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.j_phi, self.j_eps, &self.xi)
    }

    pub fn loadings(&self, basis: &CurveBasis) -> DMatrix<f64> {
        &basis.basis.evaluation * self.xi_matrix()
    }

    /// Factor precisions respect `σ_1^{-2} ≤ … ≤ σ_J^{-2}`.
    pub fn ordering_holds(&self) -> bool {
        self.sigma2_factor.windows(2).all(|w| w[0] >= w[1])
    }

    /// `K_ε = Φ Σ_e Φ' + σ_η² I`.
    pub fn state_cov(&self, basis: &CurveBasis) -> DMatrix<f64> {
        let phi = self.loadings(basis);
        let scaled = DMatrix::from_fn(phi.nrows(), phi.ncols(), |i, j| phi[(i, j)] * self.sigma2_factor[j].sqrt());
        let mut k = &scaled * scaled.transpose();
        for i in 0..k.nrows() {
            k[(i, i)] += self.sigma2_eta;
        }
        crate::linalg::symmetrize(&mut k);
        k
    }

    /// `K_ε^{-1}` via the Woodbury identity
    /// `σ_η^{-2} I − σ_η^{-4} Φ (Σ_e^{-1} + σ_η^{-2} Φ'Φ)^{-1} Φ'`.
    pub fn state_cov_inverse(&self, basis: &CurveBasis) -> Option<DMatrix<f64>> {
        let phi = self.loadings(basis);
        let s = 1.0 / self.sigma2_eta;
        let mut inner = s * phi.transpose() * &phi;
        for j in 0..self.j_eps {
            inner[(j, j)] += 1.0 / self.sigma2_factor[j];
        }
        let chol = crate::linalg::cholesky_jittered(&inner)?;
        let inv_inner = chol.inverse();
        let mut out = -(s * s) * (&phi * inv_inner * phi.transpose());
        for i in 0..out.nrows() {
            out[(i, i)] += s;
        }
        crate::linalg::symmetrize(&mut out);
        Some(out)
    }
}

/// The complete parameter vector plus latent states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub mean: Vec<MeanParams>,
    /// `σ²_ν` per series.
    pub sigma2_nu: Vec<f64>,
    pub kernel: KernelParams,
    pub innovation: Vec<InnovationParams>,
    /// `α_t`, stacked over series, for `t = 1..T`.
    pub alpha: Vec<Vec<f64>>,
}

impl ParameterState {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Every variance positive and finite, factor ordering satisfied.
    pub fn is_valid(&self) -> bool {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        self.sigma2_nu.iter().all(|&v| pos(v))
            && self
                .innovation
                .iter()
                .all(|p| pos(p.sigma2_eta) && p.sigma2_factor.iter().all(|&v| pos(v)) && p.ordering_holds())
            && self.kernel.blocks.iter().all(|b| pos(b.lambda_psi()))
    }

    /// Check the dimensions against a basis and spec.
    pub fn check_shape(&self, basis: &ModelBasis, spec: &ModelSpec) -> Result<()> {
        let k = basis.series_count();
        let bad = |d: String| Err(Error::shape("model", "assemble_dlm", d));
        if self.mean.len() != k || self.sigma2_nu.len() != k || self.innovation.len() != k || spec.series_count != k {
            return bad(format!("expected {k} series"));
        }
        for (n, s) in basis.series.iter().enumerate() {
            if self.mean[n].theta_mu.len() != s.mean.dim() {
                return bad(format!("series {n}: mean coefficients"));
            }
            let p = &self.innovation[n];
            if p.j_phi != s.loading.dim() || p.xi.len() != p.j_phi * p.j_eps || p.sigma2_factor.len() != p.j_eps {
                return bad(format!("series {n}: loading coefficients"));
            }
        }
        let blocks = spec.active_blocks();
        if blocks.len() != self.kernel.blocks.len() {
            return bad("kernel blocks differ from the active set".into());
        }
        for (b, &(r, c)) in self.kernel.blocks.iter().zip(&blocks) {
            if (b.row, b.col) != (r, c) || b.theta_psi.len() != basis.block_dim(r, c) {
                return bad(format!("kernel block ({r}, {c})"));
            }
        }
        if self.alpha.iter().any(|a| a.len() != basis.state_dim()) {
            return bad("latent state length".into());
        }
        Ok(())
    }

    /// Mean curve of series `n` on its grid.
    pub fn mean_curve(&self, basis: &ModelBasis, n: usize) -> DVector<f64> {
        basis.series[n].mean.eval(&self.mean[n].theta_mu)
    }
}

/// Kernel block coefficients reshaped to `J_row × J_col`.
pub fn coefficient_matrix(theta: &[f64], j_row: usize, j_col: usize) -> Result<DMatrix<f64>> {
    if theta.len() != j_row * j_col {
        return Err(Error::shape(
            "model",
            "kernel_surface",
            format!("coefficient length {} != {}·{}", theta.len(), j_row, j_col),
        ));
    }
    Ok(DMatrix::from_column_slice(j_row, j_col, theta))
}

/// `Ψ(τ_i, u_j) = (b(u_j) ⊗ b(τ_i))' θ` on the grids of the two series.
pub fn kernel_surface(theta: &[f64], row_axis: &KernelAxis, col_axis: &KernelAxis) -> Result<DMatrix<f64>> {
    let c = coefficient_matrix(theta, row_axis.dim(), col_axis.dim())?;
    Ok(&row_axis.evaluation * c * col_axis.evaluation.transpose())
}

/// Matrices of the state-space form
/// `y_t = Z_t(μ + α_t) + ν_t`, `α_t = G α_{t-1} + ε_t`, `α_1 ~ N(0, K_ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dlm {
    pub offsets: Vec<usize>,
    /// Stacked mean curves.
    pub mu: DVector<f64>,
    /// `G = Ψ Q`, the kernel blocks on the grid times the quadrature weights.
    pub transition: DMatrix<f64>,
    /// Block-diagonal `K_ε`.
    pub state_cov: DMatrix<f64>,
    /// `σ²_ν` per series.
    pub obs_var: Vec<f64>,
    /// Series whose states evolve jointly; distinct groups are independent.
    pub groups: Vec<Vec<usize>>,
}

impl Dlm {
    pub fn state_dim(&self) -> usize {
        self.mu.len()
    }

    pub fn series_range(&self, n: usize) -> std::ops::Range<usize> {
        self.offsets[n]..self.offsets[n + 1]
    }

    /// State indices of a group of series.
    pub fn group_indices(&self, group: &[usize]) -> Vec<usize> {
        group.iter().flat_map(|&n| self.series_range(n)).collect()
    }
}

pub fn assemble_dlm(state: &ParameterState, spec: &ModelSpec, basis: &ModelBasis) -> Result<Dlm> {
    state.check_shape(basis, spec)?;
    let n = basis.state_dim();
    let k = basis.series_count();
    let mut mu = DVector::zeros(n);
    let mut state_cov = DMatrix::zeros(n, n);
    for s in 0..k {
        let r = basis.offsets[s]..basis.offsets[s + 1];
        mu.rows_mut(r.start, r.len()).copy_from(&state.mean_curve(basis, s));
        let kc = state.innovation[s].state_cov(&basis.series[s].loading);
        state_cov.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&kc);
    }
    let mut transition = DMatrix::zeros(n, n);
    for b in &state.kernel.blocks {
        let g = block_transition(b, basis)?;
        transition
            .view_mut((basis.offsets[b.row], basis.offsets[b.col]), g.shape())
            .copy_from(&g);
    }
    Ok(Dlm {
        offsets: basis.offsets.clone(),
        mu,
        transition,
        state_cov,
        obs_var: state.sigma2_nu.clone(),
        groups: spec.independent_groups(),
    })
}

/// `Ψ_{row,col} diag(w_col)` for one block.
pub fn block_transition(block: &KernelBlock, basis: &ModelBasis) -> Result<DMatrix<f64>> {
    let mut g = kernel_surface(
        &block.theta_psi,
        &basis.series[block.row].kernel,
        &basis.series[block.col].kernel,
    )?;
    let w = &basis.series[block.col].weights;
    for j in 0..g.ncols() {
        g.column_mut(j).scale_mut(w[j]);
    }
    Ok(g)
}

/// Named ranges of the flat parameter vector used by the marginal-likelihood
/// estimator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaLayout {
    pub entries: Vec<ThetaEntry>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaEntry {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// The flat vector holds, per series, `θ_μ`, `log σ_ν^{-2}`, the loading
/// coefficients `Ξ` (each column sign-normalized so that its loading curve has
/// positive integral), `log σ_j^{-2}` and `log σ_η^{-2}`; then every active
/// kernel block's `θ_Ψ`. Smoothing parameters are not part of it: they only
/// enter the prior and are integrated out there.
impl ThetaLayout {
    pub fn new(basis: &ModelBasis, spec: &ModelSpec) -> Self {
        let mut entries = Vec::new();
        let mut pos = 0;
        let mut push = |name: String, len: usize| {
            entries.push(ThetaEntry { name, start: pos, len });
            pos += len;
        };
        for (n, s) in basis.series.iter().enumerate() {
            push(format!("theta_mu[{n}]"), s.mean.dim());
            push(format!("log_prec_nu[{n}]"), 1);
            push(format!("xi_phi[{n}]"), s.loading.dim() * s.j_eps);
            push(format!("log_prec_factor[{n}]"), s.j_eps);
            push(format!("log_prec_eta[{n}]"), 1);
        }
        for (r, c) in spec.active_blocks() {
            push(format!("theta_psi[{r},{c}]"), basis.block_dim(r, c));
        }
        Self { entries, dim: pos }
    }

    pub fn entry(&self, name: &str) -> Option<&ThetaEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Sign making the loading curve `B_φ w` integrate positively (ties broken by
/// the first nonzero coefficient).
pub fn loading_sign(basis: &SeriesBasis, w: &[f64]) -> f64 {
    let curve = basis.loading.eval(w);
    let integral = basis.weights.dot(&curve);
    if integral != 0.0 {
        return integral.signum();
    }
    w.iter().find(|v| **v != 0.0).map_or(1.0, |v| v.signum())
}

pub fn theta_pack(state: &ParameterState, basis: &ModelBasis, spec: &ModelSpec) -> Vec<f64> {
    let layout = ThetaLayout::new(basis, spec);
    let mut out = Vec::with_capacity(layout.dim);
    for (n, s) in basis.series.iter().enumerate() {
        out.extend_from_slice(&state.mean[n].theta_mu);
        out.push(-state.sigma2_nu[n].ln());
        let p = &state.innovation[n];
        for j in 0..p.j_eps {
            let col = &p.xi[j * p.j_phi..(j + 1) * p.j_phi];
            let sign = loading_sign(s, col);
            out.extend(col.iter().map(|v| v * sign));
        }
        out.extend(p.sigma2_factor.iter().map(|v| -v.ln()));
        out.push(-p.sigma2_eta.ln());
    }
    for b in &state.kernel.blocks {
        out.extend_from_slice(&b.theta_psi);
    }
    debug_assert_eq!(out.len(), layout.dim);
    out
}

/// Inverse of [`theta_pack`]. Quantities outside the flat vector (latent
/// states, factors, smoothing parameters and the loading signs) are taken
/// from `template`.
pub fn theta_unpack(theta: &[f64], template: &ParameterState, basis: &ModelBasis, spec: &ModelSpec) -> Result<ParameterState> {
    let layout = ThetaLayout::new(basis, spec);
    if theta.len() != layout.dim {
        return Err(Error::shape(
            "model",
            "theta_unpack",
            format!("vector length {} != {}", theta.len(), layout.dim),
        ));
    }
    let mut state = template.clone();
    let mut pos = 0;
    let mut take = |len: usize| {
        let s = &theta[pos..pos + len];
        pos += len;
        s
    };
    for (n, s) in basis.series.iter().enumerate() {
        state.mean[n].theta_mu = take(s.mean.dim()).to_vec();
        state.sigma2_nu[n] = (-take(1)[0]).exp();
        let p = &mut state.innovation[n];
        for j in 0..p.j_eps {
            let w = take(p.j_phi);
            let range = j * p.j_phi..(j + 1) * p.j_phi;
            let sign = loading_sign(s, &template.innovation[n].xi[range.clone()]);
            for (dst, v) in p.xi[range].iter_mut().zip(w) {
                *dst = sign * v;
            }
        }
        for (dst, v) in p.sigma2_factor.iter_mut().zip(take(p.j_eps)) {
            *dst = (-v).exp();
        }
        p.sigma2_eta = (-take(1)[0]).exp();
    }
    for b in state.kernel.blocks.iter_mut() {
        b.theta_psi = take(b.theta_psi.len()).to_vec();
    }
    Ok(state)
}
