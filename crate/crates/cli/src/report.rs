//! Posterior summaries and report writers.

use std::fs;
use std::path::{Path, PathBuf};

use ftsgc_core::gibbs::Sampler;
use ftsgc_core::model::kernel_surface;
use ftsgc_core::{Hypothesis, PosteriorSample};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::ingest::IngestedData;

/// Posterior mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

impl Moments {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { mean, sd: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub name: String,
    /// Grid points on the original `tau` scale.
    pub tau: Vec<f64>,
    /// Pointwise posterior mean and sd of the mean curve `μ`.
    pub mean_curve: Vec<f64>,
    pub mean_curve_sd: Vec<f64>,
    pub sigma2_nu: Moments,
    pub sigma2_eta: Moments,
    /// Posterior means of the factor variances, largest first.
    pub factor_variances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSummary {
    /// Series driven by the kernel.
    pub response: String,
    /// Series whose past enters.
    pub cause: String,
    /// `∫∫ Ψ²` on the rescaled grids.
    pub squared_norm: Moments,
    /// Posterior mean surface; rows follow the response grid.
    pub surface: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub hypothesis: Hypothesis,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub draws: usize,
    pub loglik: Moments,
    pub series: Vec<SeriesSummary>,
    pub kernels: Vec<KernelSummary>,
}

fn weighted_norm(surface: &DMatrix<f64>, wr: &DVector<f64>, wc: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..surface.nrows() {
        for j in 0..surface.ncols() {
            total += wr[i] * wc[j] * surface[(i, j)].powi(2);
        }
    }
    total
}

/// Summarize a non-empty posterior sample.
pub fn summarize(sample: &PosteriorSample, sampler: &Sampler<'_>, data: &IngestedData, iterations: usize, burn_in: usize, thin: usize) -> Result<PosteriorSummary> {
    if sample.is_empty() {
        return Err(CliError::Output {
            op: "summarize",
            reason: "no posterior draws were stored".into(),
        });
    }
    let basis = &sampler.basis;
    let s = sample.len() as f64;
    let mut series = Vec::new();
    for (n, name) in data.sample.series_names.iter().enumerate() {
        let curves: Vec<DVector<f64>> = sample.draws.iter().map(|d| d.state.mean_curve(basis, n)).collect();
        let mean = curves.iter().fold(DVector::zeros(curves[0].len()), |a, c| a + c) / s;
        let sd = curves
            .iter()
            .fold(DVector::zeros(mean.len()), |a, c| a + (c - &mean).map(|x| x * x))
            .map(|v| (v / (s - 1.0).max(1.0)).sqrt());
        let j_eps = sample.draws[0].state.innovation[n].j_eps;
        series.push(SeriesSummary {
            name: name.clone(),
            tau: data.original_tau[n].clone(),
            mean_curve: mean.iter().copied().collect(),
            mean_curve_sd: sd.iter().copied().collect(),
            sigma2_nu: Moments::of(sample.draws.iter().map(|d| d.state.sigma2_nu[n])),
            sigma2_eta: Moments::of(sample.draws.iter().map(|d| d.state.innovation[n].sigma2_eta)),
            factor_variances: (0..j_eps)
                .map(|j| sample.draws.iter().map(|d| d.state.innovation[n].sigma2_factor[j]).sum::<f64>() / s)
                .collect(),
        });
    }
    let mut kernels = Vec::new();
    for (b, &(r, c)) in sampler.spec.active_blocks().iter().enumerate() {
        let (ar, ac) = (&basis.series[r].kernel, &basis.series[c].kernel);
        let surfaces = sample
            .draws
            .iter()
            .map(|d| kernel_surface(&d.state.kernel.blocks[b].theta_psi, ar, ac))
            .collect::<ftsgc_core::Result<Vec<_>>>()?;
        let mean = surfaces.iter().fold(DMatrix::zeros(ar.evaluation.nrows(), ac.evaluation.nrows()), |a, x| a + x) / s;
        let (wr, wc) = (&basis.series[r].weights, &basis.series[c].weights);
        kernels.push(KernelSummary {
            response: data.sample.series_names[r].clone(),
            cause: data.sample.series_names[c].clone(),
            squared_norm: Moments::of(surfaces.iter().map(|x| weighted_norm(x, wr, wc))),
            surface: mean.row_iter().map(|row| row.iter().copied().collect()).collect(),
        });
    }
    Ok(PosteriorSummary {
        hypothesis: sampler.spec.hypothesis,
        iterations,
        burn_in,
        thin,
        draws: sample.len(),
        loglik: Moments::of(sample.draws.iter().map(|d| d.loglik)),
        series,
        kernels,
    })
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io("write_report", dir, e))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output {
        op: "write_json",
        reason: e.to_string(),
    })?;
    fs::write(&path, text + "\n").map_err(|e| CliError::io("write_json", &path, e))?;
    Ok(path)
}

pub fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<PathBuf> {
    let path = dir.join(name);
    let err = |e: csv::Error| CliError::Output {
        op: "write_csv",
        reason: format!("{}: {e}", path.display()),
    };
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io("write_csv", &path, e))?;
    Ok(path)
}
