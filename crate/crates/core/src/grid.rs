//! Evaluation grids, quadrature weights, incidence maps and spline bases.
//!
//! Every series carries its own ordered set of evaluation points. Continuous
//! series use trapezoid weights; vector-valued (discrete) series have one
//! point per component and unit weights. Bases come in two flavours: a
//! low-rank thin-plate basis for mean and loading curves, and a cubic
//! B-spline basis whose tensor square parameterizes the autoregressive
//! kernels.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when matching observed abscissae to grid points.
pub const POINT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    Continuous,
    /// One point per vector component; unit quadrature, no smoothness.
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesGrid {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub kind: GridKind,
}

impl SeriesGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Length of the index set covered by the grid.
    pub fn span(&self) -> f64 {
        self.points[self.points.len() - 1] - self.points[0]
    }

    /// Vector-valued series with `components` entries placed at equally
    /// spaced positions on `[0, 1]`.
    pub fn discrete(components: usize) -> Self {
        let points = if components == 1 {
            vec![0.0]
        } else {
            (0..components)
                .map(|i| i as f64 / (components - 1) as f64)
                .collect()
        };
        Self {
            points,
            weights: vec![1.0; components],
            kind: GridKind::Discrete,
        }
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// Evaluation points for all `K` series plus their quadrature weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationGrid {
    pub series: Vec<SeriesGrid>,
}

impl EvaluationGrid {
    pub fn series_count(&self) -> usize {
        self.series.len()
    }

    /// Starting index of each series inside the stacked state vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.series.len() + 1);
        let mut acc = 0;
        for s in &self.series {
            out.push(acc);
            acc += s.len();
        }
        out.push(acc);
        out
    }

    pub fn total_points(&self) -> usize {
        self.series.iter().map(SeriesGrid::len).sum()
    }

    /// Block quadrature matrix `Q`. Integrating over series `m` inside the
    /// evolution equation only ever uses series `m`'s own weights, so `Q` is
    /// block diagonal with `diag(w^m)` blocks.
    pub fn quadrature_matrix(&self) -> DMatrix<f64> {
        let n = self.total_points();
        let mut q = DMatrix::zeros(n, n);
        let offsets = self.offsets();
        for (s, grid) in self.series.iter().enumerate() {
            for (i, w) in grid.weights.iter().enumerate() {
                q[(offsets[s] + i, offsets[s] + i)] = *w;
            }
        }
        q
    }
}

/// Trapezoid weights on sorted abscissae.
pub fn trapezoid_weights(points: &[f64]) -> Vec<f64> {
    let m = points.len();
    let mut w = vec![0.0; m];
    for i in 0..m - 1 {
        let h = points[i + 1] - points[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

/// Build a continuous evaluation grid for every series.
pub fn make_grid(points: &[Vec<f64>]) -> Result<EvaluationGrid> {
    let mut series = Vec::with_capacity(points.len());
    for (s, p) in points.iter().enumerate() {
        if p.len() < 3 {
            return Err(Error::GridTooSmall {
                series: s,
                count: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid {
                series: s,
                reason: "non-finite abscissa".into(),
            });
        }
        if p.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid {
                series: s,
                reason: "abscissae must be strictly increasing".into(),
            });
        }
        series.push(SeriesGrid {
            points: p.clone(),
            weights: trapezoid_weights(p),
            kind: GridKind::Continuous,
        });
    }
    Ok(EvaluationGrid { series })
}

/// 0/1 selector from grid values to the points observed at one time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidenceMatrix {
    /// Grid index picked by each row.
    pub columns: Vec<usize>,
    pub grid_len: usize,
}

impl IncidenceMatrix {
    pub fn rows(&self) -> usize {
        self.columns.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.columns.len(), self.grid_len);
        for (r, &c) in self.columns.iter().enumerate() {
            z[(r, c)] = 1.0;
        }
        z
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|&c| values[c]).collect()
    }
}

/// Index of the grid point matching `x` within [`POINT_TOLERANCE`].
pub fn locate(grid: &SeriesGrid, x: f64) -> Option<usize> {
    let idx = grid.points.partition_point(|&p| p < x - POINT_TOLERANCE);
    (idx < grid.points.len() && (grid.points[idx] - x).abs() <= POINT_TOLERANCE).then_some(idx)
}

pub fn incidence(grid: &SeriesGrid, observed: &[f64]) -> Result<IncidenceMatrix> {
    let columns = observed
        .iter()
        .map(|&x| {
            locate(grid, x).ok_or(Error::PointNotOnGrid {
                point: x,
                tolerance: POINT_TOLERANCE,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IncidenceMatrix {
        columns,
        grid_len: grid.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    ThinPlateLowRank,
    CubicBSpline,
    /// Identity basis of a vector-valued series.
    Identity,
}

/// Basis values on the grid together with a roughness penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub kind: BasisKind,
    /// `M x J` matrix of basis values.
    pub evaluation: DMatrix<f64>,
    /// `J x J` symmetric nonnegative-definite penalty.
    pub penalty: DMatrix<f64>,
    pub knots: Vec<f64>,
}

impl BasisSet {
    pub fn dim(&self) -> usize {
        self.evaluation.ncols()
    }
}

/// Default number of mean and loading basis functions for a series of `m`
/// points.
pub fn default_curve_basis_dim(m: usize) -> usize {
    m.div_ceil(2).clamp(3, 15).min(m)
}

pub const DEFAULT_KERNEL_BASIS_DIM: usize = 8;

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// Low-rank thin-plate spline basis `[1, τ, Z Ω^{-1/2}]` with `J - 2` knots at
/// equally spaced quantiles of the grid. The radial part is rescaled so that
/// its penalty is the identity; the linear part is unpenalized.
pub fn thin_plate_basis(points: &[f64], dim: usize) -> Result<BasisSet> {
    let m = points.len();
    if dim < 3 || dim > m {
        return Err(Error::BadBasisOrder {
            op: "thin_plate_basis",
            order: dim,
            points: m,
            reason: "need 3 <= J <= M",
        });
    }
    let n_knots = dim - 2;
    let knots: Vec<f64> = (1..=n_knots)
        .map(|k| quantile(points, k as f64 / (n_knots + 1) as f64))
        .collect();
    let cube = |x: f64| x.abs().powi(3);
    let z = DMatrix::from_fn(m, n_knots, |i, k| cube(points[i] - knots[k]));
    let omega = DMatrix::from_fn(n_knots, n_knots, |k, l| cube(knots[k] - knots[l]));
    // Ω^{-1/2} through the eigen-decomposition, using |λ| since the cubic
    // radial kernel is only conditionally positive definite.
    let eig = SymmetricEigen::new(omega);
    let max_abs = eig.eigenvalues.amax();
    let scale = DVector::from_iterator(
        n_knots,
        eig.eigenvalues.iter().map(|&l| {
            if max_abs > 0.0 && l.abs() > 1e-12 * max_abs {
                1.0 / l.abs().sqrt()
            } else {
                1.0
            }
        }),
    );
    let inv_sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose();
    let radial = z * inv_sqrt;
    let mut evaluation = DMatrix::zeros(m, dim);
    for i in 0..m {
        evaluation[(i, 0)] = 1.0;
        evaluation[(i, 1)] = points[i];
        for k in 0..n_knots {
            evaluation[(i, 2 + k)] = radial[(i, k)];
        }
    }
    let mut penalty = DMatrix::zeros(dim, dim);
    for k in 2..dim {
        penalty[(k, k)] = 1.0;
    }
    Ok(BasisSet {
        kind: BasisKind::ThinPlateLowRank,
        evaluation,
        penalty,
        knots,
    })
}

/// Cubic B-spline basis on `[lo, hi]` with equally spaced interior knots.
#[derive(Debug, Clone, PartialEq)]
pub struct BSpline {
    /// Full knot vector including the four-fold boundary knots.
    pub knots: Vec<f64>,
    pub dim: usize,
}

const ORDER: usize = 4;

impl BSpline {
    pub fn new(lo: f64, hi: f64, dim: usize) -> Self {
        let n_interior = dim - ORDER;
        let mut knots = vec![lo; ORDER];
        for k in 1..=n_interior {
            knots.push(lo + (hi - lo) * k as f64 / (n_interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(hi, ORDER));
        Self { knots, dim }
    }

    fn span_index(&self, x: f64) -> usize {
        let n = self.dim;
        if x >= self.knots[n] {
            return n - 1;
        }
        let mut i = ORDER - 1;
        while i + 1 < n && x >= self.knots[i + 1] {
            i += 1;
        }
        i
    }

    /// Values of the basis functions (or their `deriv`-th derivative) at `x`.
    pub fn eval(&self, x: f64, deriv: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let t = &self.knots;
        let span = self.span_index(x);
        // de Boor triangular table for the order reduced by `deriv`.
        let p = ORDER - 1;
        let degree = p.saturating_sub(deriv);
        if deriv > p {
            return out;
        }
        let mut n = vec![0.0; p + 1];
        n[0] = 1.0;
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        for j in 1..=degree {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        // n[0..=degree] are degree-`degree` B-splines indexed from span-degree.
        let mut coeffs: Vec<(usize, f64)> = (0..=degree).map(|r| (span - degree + r, n[r])).collect();
        // Raise back to cubic through the derivative recursion
        // B'_{i,k} = k (B_{i,k-1}/(t_{i+k}-t_i) - B_{i+1,k-1}/(t_{i+k+1}-t_{i+1})).
        for k in (degree + 1)..=p {
            let mut next: Vec<(usize, f64)> = Vec::with_capacity(coeffs.len() + 1);
            let first = coeffs[0].0;
            for i in first.saturating_sub(1)..=coeffs[coeffs.len() - 1].0 {
                let get = |idx: usize| coeffs.iter().find(|c| c.0 == idx).map_or(0.0, |c| c.1);
                let d1 = t[i + k] - t[i];
                let d2 = t[i + k + 1] - t[i + 1];
                let a = if d1 > 0.0 { get(i) / d1 } else { 0.0 };
                let b = if d2 > 0.0 { get(i + 1) / d2 } else { 0.0 };
                next.push((i, k as f64 * (a - b)));
            }
            coeffs = next;
        }
        for (i, v) in coeffs {
            if i < self.dim {
                out[i] += v;
            }
        }
        out
    }

    /// Greville abscissae; coefficients equal to these reproduce `f(x) = x`.
    pub fn greville(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (self.knots[i + 1] + self.knots[i + 2] + self.knots[i + 3]) / 3.0)
            .collect()
    }

    /// `∫ b^{(r)}(x) b^{(r)}(x)' dx` over the domain, exact by Gauss–Legendre.
    pub fn gram(&self, deriv: usize) -> DMatrix<f64> {
        const NODES: [f64; 4] = [
            -0.861_136_311_594_052_6,
            -0.339_981_043_584_856_3,
            0.339_981_043_584_856_3,
            0.861_136_311_594_052_6,
        ];
        const WEIGHTS: [f64; 4] = [
            0.347_854_845_137_453_8,
            0.652_145_154_862_546_1,
            0.652_145_154_862_546_1,
            0.347_854_845_137_453_8,
        ];
        let mut g = DMatrix::zeros(self.dim, self.dim);
        for w in self.knots.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, wt) in NODES.iter().zip(WEIGHTS) {
                let v = DVector::from_vec(self.eval(mid + half * x, deriv));
                g += (half * wt) * &v * v.transpose();
            }
        }
        g
    }
}

/// One-dimensional ingredients of a kernel basis along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelAxis {
    pub kind: BasisKind,
    /// `M x J` basis values on the grid.
    pub evaluation: DMatrix<f64>,
    /// `∫ b b'`, `∫ b' b''` and `∫ b'' b'''`; the derivative Grams vanish for
    /// a discrete axis.
    pub gram: DMatrix<f64>,
    pub d1_gram: DMatrix<f64>,
    pub d2_gram: DMatrix<f64>,
    pub knots: Vec<f64>,
    /// Coefficients that represent the identity function `x`, when the axis
    /// can represent it.
    pub linear_coeffs: Option<Vec<f64>>,
}

impl KernelAxis {
    pub fn dim(&self) -> usize {
        self.evaluation.ncols()
    }

    pub fn bspline(grid: &SeriesGrid, dim: usize, op: &'static str) -> Result<Self> {
        let m = grid.len();
        if dim < ORDER || dim > m {
            return Err(Error::BadBasisOrder {
                op,
                order: dim,
                points: m,
                reason: "cubic B-splines need 4 <= J <= M",
            });
        }
        let (lo, hi) = (grid.points[0], grid.points[m - 1]);
        let spline = BSpline::new(lo, hi, dim);
        let evaluation = DMatrix::from_fn(m, dim, |i, j| spline.eval(grid.points[i], 0)[j]);
        Ok(Self {
            kind: BasisKind::CubicBSpline,
            evaluation,
            gram: spline.gram(0),
            d1_gram: spline.gram(1),
            d2_gram: spline.gram(2),
            knots: spline.knots.clone(),
            linear_coeffs: Some(spline.greville()),
        })
    }

    pub fn identity(grid: &SeriesGrid) -> Self {
        let m = grid.len();
        Self {
            kind: BasisKind::Identity,
            evaluation: DMatrix::identity(m, m),
            gram: DMatrix::identity(m, m),
            d1_gram: DMatrix::zeros(m, m),
            d2_gram: DMatrix::zeros(m, m),
            knots: Vec::new(),
            linear_coeffs: Some(grid.points.clone()),
        }
    }

    /// Kernel axis appropriate for a series: cubic B-splines for continuous
    /// grids (with `J` clamped to the grid size), identity for discrete ones.
    pub fn for_series(grid: &SeriesGrid, dim: usize) -> Result<Self> {
        match grid.kind {
            GridKind::Discrete => Ok(Self::identity(grid)),
            GridKind::Continuous => Self::bspline(grid, dim, "kernel_axis"),
        }
    }
}

/// Penalty pieces for a tensor-product kernel block `(τ-axis, u-axis)` with
/// coefficient layout `θ[a + b·J_τ]` (τ index fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorPenalty {
    /// Thin-plate bending energy `∫∫ Ψ_ττ² + 2Ψ_τu² + Ψ_uu²`.
    pub omega2: DMatrix<f64>,
    /// Gram matrix `∫∫ (c(u)⊗b(τ))(c(u)⊗b(τ))'`.
    pub omega0: DMatrix<f64>,
}

impl TensorPenalty {
    pub fn new(tau: &KernelAxis, u: &KernelAxis) -> Self {
        let omega2 = u.gram.kronecker(&tau.d2_gram)
            + 2.0 * u.d1_gram.kronecker(&tau.d1_gram)
            + u.d2_gram.kronecker(&tau.gram);
        let omega0 = u.gram.kronecker(&tau.gram);
        Self { omega2, omega0 }
    }

    /// `Ω_Ψ = Ω_2 + κ Ω_0`.
    pub fn combined(&self, kappa: f64) -> DMatrix<f64> {
        let mut p = &self.omega2 + kappa * &self.omega0;
        crate::linalg::symmetrize(&mut p);
        p
    }
}

/// Kernel surface basis for a continuous series: the 1-D cubic B-spline
/// evaluation matrix and the tensor penalty `Ω_2 + Ω_0` (roughness weight 1).
pub fn bspline_tensor_basis(points: &[f64], dim: usize) -> Result<BasisSet> {
    let grid = SeriesGrid {
        points: points.to_vec(),
        weights: trapezoid_weights(points),
        kind: GridKind::Continuous,
    };
    let axis = KernelAxis::bspline(&grid, dim, "bspline_tensor_basis")?;
    let penalty = TensorPenalty::new(&axis, &axis).combined(1.0);
    Ok(BasisSet {
        kind: BasisKind::CubicBSpline,
        evaluation: axis.evaluation,
        penalty,
        knots: axis.knots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn equispaced(m: usize) -> Vec<f64> {
        (0..m).map(|i| i as f64 / (m - 1) as f64).collect()
    }

    fn rank(m: &DMatrix<f64>) -> usize {
        let sv = m.clone().svd(false, false).singular_values;
        let tol = sv.max() * 1e-10 * m.nrows().max(m.ncols()) as f64;
        sv.iter().filter(|&&s| s > tol).count()
    }

    #[test]
    fn three_point_trapezoid() {
        let g = make_grid(&[vec![0.0, 0.5, 1.0]]).unwrap();
        assert_eq!(g.series[0].weights, vec![0.25, 0.5, 0.25]);
    }

    #[test]
    fn thirty_points_integrate_constants_and_lines_exactly() {
        let g = make_grid(&[equispaced(30)]).unwrap();
        let s = &g.series[0];
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((s.integrate(&vec![1.0; 30]) - 1.0).abs() < 1e-12);
        let line: Vec<f64> = s.points.iter().map(|x| 3.0 * x - 1.0).collect();
        assert!((s.integrate(&line) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn irregular_grid_is_exact_for_lines() {
        let pts = vec![0.0, 0.1, 0.15, 0.5, 0.9, 1.3];
        let g = make_grid(std::slice::from_ref(&pts)).unwrap();
        let vals: Vec<f64> = pts.iter().map(|x| 2.0 * x + 0.5).collect();
        let exact = (1.3f64.powi(2)) + 0.5 * 1.3;
        assert!((g.series[0].integrate(&vals) - exact).abs() < 1e-12);
        assert!((g.series[0].weights.iter().sum::<f64>() - 1.3).abs() < 1e-12);
    }

    #[test]
    fn grid_errors() {
        assert!(matches!(
            make_grid(&[vec![0.0, 1.0]]),
            Err(Error::GridTooSmall { count: 2, .. })
        ));
        assert!(matches!(
            make_grid(&[vec![0.0, 0.7, 0.5]]),
            Err(Error::InvalidGrid { .. })
        ));
        assert!(matches!(
            make_grid(&[vec![0.0, f64::NAN, 0.5]]),
            Err(Error::InvalidGrid { .. })
        ));
    }

    #[test]
    fn quadrature_matrix_is_block_diagonal() {
        let g = make_grid(&[equispaced(4), equispaced(3)]).unwrap();
        let q = g.quadrature_matrix();
        assert_eq!(q.shape(), (7, 7));
        for i in 0..7 {
            for j in 0..7 {
                if i != j {
                    assert_eq!(q[(i, j)], 0.0);
                }
            }
        }
        assert_eq!(q[(4, 4)], 0.25);
    }

    #[test]
    fn incidence_selectors() {
        let g = make_grid(&[vec![0.0, 0.5, 1.0]]).unwrap();
        let s = &g.series[0];
        let full = incidence(s, &s.points).unwrap();
        assert_eq!(full.to_dense(), DMatrix::identity(3, 3));
        let part = incidence(s, &[0.0, 1.0]).unwrap();
        assert_eq!(part.columns, vec![0, 2]);
        assert!(matches!(
            incidence(s, &[0.25]),
            Err(Error::PointNotOnGrid { .. })
        ));
        // Within tolerance.
        assert_eq!(incidence(s, &[0.5 + 1e-10]).unwrap().columns, vec![1]);
    }

    #[test]
    fn sparse_incidence_recovers_observed_entries() {
        let g = make_grid(&[equispaced(30)]).unwrap();
        let s = &g.series[0];
        let observed: Vec<f64> = s.points.iter().step_by(2).copied().take(12).collect();
        let z = incidence(s, &observed).unwrap();
        assert_eq!(z.rows(), (0.4f64 * 30.0).ceil() as usize);
        let f: Vec<f64> = s.points.iter().map(|x| (3.0 * x).sin()).collect();
        let dense = z.to_dense() * DVector::from_vec(f.clone());
        for (r, x) in observed.iter().enumerate() {
            assert!((dense[r] - (3.0 * x).sin()).abs() < 1e-15);
        }
        assert_eq!(z.apply(&f), dense.as_slice());
    }

    #[test]
    fn thin_plate_polynomial_part() {
        let b = thin_plate_basis(&[0.0, 0.5, 1.0], 3).unwrap();
        for i in 0..3 {
            assert_eq!(b.evaluation[(i, 0)], 1.0);
        }
        assert_eq!(b.evaluation.column(1).as_slice(), &[0.0, 0.5, 1.0]);
        let linear = DVector::from_vec(vec![0.3, -2.0, 0.0]);
        assert_eq!(&b.penalty * linear, DVector::zeros(3));
    }

    #[test]
    fn thin_plate_rank_and_penalty() {
        let b = thin_plate_basis(&equispaced(30), 10).unwrap();
        assert_eq!(b.evaluation.shape(), (30, 10));
        assert_eq!(rank(&b.evaluation), 10);
        assert!(SymmetricEigen::new(b.penalty.clone()).eigenvalues.min() >= -1e-10);
        assert!(matches!(
            thin_plate_basis(&equispaced(5), 6),
            Err(Error::BadBasisOrder { .. })
        ));
        assert!(matches!(
            thin_plate_basis(&equispaced(5), 2),
            Err(Error::BadBasisOrder { .. })
        ));
    }

    #[test]
    fn bspline_partition_of_unity_and_linear_reproduction() {
        let pts = equispaced(30);
        let b = bspline_tensor_basis(&pts, 8).unwrap();
        for i in 0..30 {
            let s: f64 = b.evaluation.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let spline = BSpline::new(0.0, 1.0, 8);
        let g = DVector::from_vec(spline.greville());
        let reproduced = &b.evaluation * g;
        for i in 0..30 {
            assert!((reproduced[i] - pts[i]).abs() < 1e-12);
        }
        assert_eq!(b.penalty.shape(), (64, 64));
    }

    #[test]
    fn bspline_derivatives_match_finite_differences() {
        let s = BSpline::new(0.0, 1.0, 7);
        for &x in &[0.05, 0.33, 0.5, 0.71, 0.98] {
            let h = 1e-6;
            let d_fd: Vec<f64> = s
                .eval(x + h, 0)
                .iter()
                .zip(s.eval(x - h, 0))
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            let d2_fd: Vec<f64> = s
                .eval(x + h, 1)
                .iter()
                .zip(s.eval(x - h, 1))
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            for (a, b) in s.eval(x, 1).iter().zip(&d_fd) {
                assert!((a - b).abs() < 1e-5, "first derivative at {x}");
            }
            for (a, b) in s.eval(x, 2).iter().zip(&d2_fd) {
                assert!((a - b).abs() < 1e-4, "second derivative at {x}");
            }
        }
    }

    #[test]
    fn roughness_penalty_annihilates_planes() {
        let grid = make_grid(&[equispaced(30)]).unwrap();
        let axis = KernelAxis::bspline(&grid.series[0], 8, "test").unwrap();
        let pen = TensorPenalty::new(&axis, &axis);
        let g = axis.linear_coeffs.clone().unwrap();
        let j = axis.dim();
        let theta = DVector::from_fn(j * j, |idx, _| {
            let (a, b) = (idx % j, idx / j);
            0.7 - 1.3 * g[a] + 2.1 * g[b]
        });
        let q = (theta.transpose() * &pen.omega2 * &theta)[(0, 0)];
        assert!(q.abs() < 1e-9, "{q}");
        let e = SymmetricEigen::new(pen.combined(1.0)).eigenvalues;
        assert!(e.min() > 0.0);
        let e2 = SymmetricEigen::new(pen.omega2.clone()).eigenvalues;
        assert!(e2.min() >= -1e-10 * e2.max());
    }

    #[test]
    fn bspline_order_errors() {
        assert!(matches!(
            bspline_tensor_basis(&equispaced(30), 3),
            Err(Error::BadBasisOrder { .. })
        ));
        assert!(matches!(
            bspline_tensor_basis(&equispaced(6), 8),
            Err(Error::BadBasisOrder { .. })
        ));
    }

    #[test]
    fn default_dims() {
        assert_eq!(default_curve_basis_dim(30), 15);
        assert_eq!(default_curve_basis_dim(9), 5);
        assert_eq!(default_curve_basis_dim(3), 3);
        assert_eq!(default_curve_basis_dim(24), 12);
    }
}
