//! The four subcommands. Each returns the paths it wrote; all files are
//! written after the estimation work has finished.

use std::path::{Path, PathBuf};

use ftsgc_core::evidence::{bayes_factor, mhm_log_marginal, EvidenceReport, MhmEstimate};
use ftsgc_core::gibbs::{Chain, Checkpoint, GibbsConfig, Sampler};
use ftsgc_core::model::{assemble_dlm, Hypothesis, ModelSpec};
use ftsgc_core::statespace::forecast;
use ftsgc_core::{replicate_study, run_chain};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::ingest::{ingest, IngestedData};
use crate::report::{ensure_dir, summarize, write_csv, write_json};

/// Sweeps between progress messages.
const PROGRESS_EVERY: usize = 250;
/// RNG stream of the forecast simulation, apart from the chain streams.
const FORECAST_STREAM: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fit,
    Forecast,
    TestCausality,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Forecast => "forecast",
            Command::TestCausality => "test-causality",
        }
    }
}

/// Run one subcommand, writing its reports into `out`.
pub fn run(command: Command, config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    match command {
        Command::Simulate => cmd_simulate(config, out),
        Command::Fit => cmd_fit(config, out),
        Command::Forecast => cmd_forecast(config, out),
        Command::TestCausality => cmd_test_causality(config, out).map(|(paths, _)| paths),
    }
}

/// Resolve the (response, cause) pair, refusing the same series twice.
fn causal_pair(data: &IngestedData, config: &RunConfig, op: &'static str) -> Result<[usize; 2]> {
    let names = &data.sample.series_names;
    let pick = |name: &Option<String>, default: usize| -> Result<usize> {
        match name {
            Some(n) => data
                .series_index(n)
                .ok_or_else(|| CliError::invalid(op, format!("series `{n}` does not occur in the data"))),
            None => {
                if default < names.len() {
                    Ok(default)
                } else {
                    Err(CliError::invalid(op, format!("need at least 2 series, found {}", names.len())))
                }
            }
        }
    };
    let response = pick(&config.response, 0)?;
    let cause = match (&config.cause, &config.response) {
        (None, Some(_)) => (0..names.len())
            .find(|&n| n != response)
            .ok_or_else(|| CliError::invalid(op, "need at least 2 series"))?,
        _ => pick(&config.cause, 1)?,
    };
    if response == cause {
        return Err(CliError::DegenerateInput {
            op,
            series: names[response].clone(),
        });
    }
    Ok([response, cause])
}

/// Load the data and pick the series and model for `fit` and `forecast`.
fn prepare(config: &RunConfig, op: &'static str) -> Result<(IngestedData, ModelSpec)> {
    config.validate(op)?;
    let data = ingest(config.data_path(op)?, &config.vector_series)?;
    match config.hypothesis {
        Hypothesis::Full => {
            let k = data.sample.series_count();
            Ok((data, ModelSpec::full(k)))
        }
        h => {
            let pair = causal_pair(&data, config, op)?;
            Ok((data.select(&pair), ModelSpec::for_hypothesis(h, 2)?))
        }
    }
}

fn run_to(chain: &mut Chain<'_>, until: usize) -> Result<()> {
    while chain.iteration < until.min(chain.config.iterations) {
        let next = (chain.iteration / PROGRESS_EVERY + 1) * PROGRESS_EVERY;
        chain.run_until(next.min(until))?;
        log::info!("cli::run_chain: {} / {} sweeps", chain.iteration, chain.config.iterations);
    }
    Ok(())
}

/// Fit one model; writes `posterior_summary.json` and `checkpoint.json`.
pub fn cmd_fit(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (data, spec) = prepare(config, "fit")?;
    let mut chain = match &config.resume {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io("fit", path, e))?;
            let checkpoint: Checkpoint = serde_json::from_str(&text).map_err(|e| CliError::Config {
                path: path.clone(),
                reason: format!("not a checkpoint: {e}"),
            })?;
            if checkpoint.spec != spec {
                return Err(CliError::invalid("fit", "checkpoint was written for a different model"));
            }
            Chain::resume(&data.sample, checkpoint)?
        }
        None => Chain::new(&data.sample, &spec, &config.gibbs)?,
    };
    let until = config.stop_after.unwrap_or(chain.config.iterations);
    run_to(&mut chain, until)?;
    ensure_dir(out)?;
    let mut written = vec![write_json(out, "checkpoint.json", &chain.checkpoint())?];
    if chain.sample.is_empty() {
        log::warn!("cli::fit: stopped before any draw was stored; no posterior summary written");
    } else {
        let c = &chain.config;
        let summary = summarize(&chain.sample, &chain.sampler, &data, chain.iteration, c.burn_in(), c.thin)?;
        written.push(write_json(out, "posterior_summary.json", &summary)?);
    }
    Ok(written)
}

/// One row of `forecast.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub time: i64,
    pub series: String,
    pub tau: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Fit, then forecast `horizon` steps past the last observed time.
pub fn cmd_forecast(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (data, spec) = prepare(config, "forecast")?;
    let sampler = Sampler::new(&data.sample, &spec, &config.gibbs.dims, config.gibbs.kappa)?;
    let sample = run_chain(&data.sample, &spec, &config.gibbs)?;
    if sample.is_empty() {
        return Err(CliError::invalid("forecast", "the chain stored no draws"));
    }
    let step = sample.len().div_ceil(config.forecast_draws).max(1);
    let draws = sample
        .draws
        .iter()
        .step_by(step)
        .map(|d| {
            let dlm = assemble_dlm(&d.state, &spec, &sampler.basis)?;
            let last = d.state.alpha.last().cloned().unwrap_or_default();
            Ok((dlm, DVector::from_vec(last)))
        })
        .collect::<ftsgc_core::Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(FORECAST_STREAM);
    let fc = forecast(&draws, config.horizon, &mut rng)?;
    let last_time = *data.sample.time_labels.last().expect("ingest keeps at least one time");
    let offsets = data.sample.grid.offsets();
    let mut rows = Vec::new();
    for h in 0..config.horizon {
        for (n, name) in data.sample.series_names.iter().enumerate() {
            for (i, &tau) in data.original_tau[n].iter().enumerate() {
                rows.push(ForecastRow {
                    time: last_time + h as i64 + 1,
                    series: name.clone(),
                    tau,
                    mean: fc.mean[h][offsets[n] + i],
                    sd: fc.sd[h][offsets[n] + i],
                });
            }
        }
    }
    ensure_dir(out)?;
    Ok(vec![write_csv(out, "forecast.csv", &rows)?])
}

/// Fit both hypotheses side by side and compare their marginal likelihoods.
/// Writes `evidence.json` and returns the report.
pub fn cmd_test_causality(config: &RunConfig, out: &Path) -> Result<(Vec<PathBuf>, EvidenceReport)> {
    config.validate("test-causality")?;
    let all = ingest(config.data_path("test-causality")?, &config.vector_series)?;
    let data = all.select(&causal_pair(&all, config, "test-causality")?);
    let sample = &data.sample;
    let fit = |spec: ModelSpec, stream: u64| -> ftsgc_core::Result<MhmEstimate> {
        let gibbs = GibbsConfig {
            stream,
            ..config.gibbs.clone()
        };
        let sampler = Sampler::new(sample, &spec, &gibbs.dims, gibbs.kappa)?;
        let draws = run_chain(sample, &spec, &gibbs)?;
        log::info!("cli::test_causality: {:?} chain finished", spec.hypothesis);
        mhm_log_marginal(&draws, &sampler)
    };
    let (unrestricted, restricted) = std::thread::scope(|scope| {
        let u = scope.spawn(|| fit(ModelSpec::unrestricted(), 0));
        let r = scope.spawn(|| fit(ModelSpec::restricted(), 1));
        (
            u.join().expect("unrestricted chain panicked"),
            r.join().expect("restricted chain panicked"),
        )
    });
    let report = bayes_factor(&unrestricted?, &restricted?);
    ensure_dir(out)?;
    let path = write_json(out, "evidence.json", &report)?;
    Ok((vec![path], report))
}

/// Run the replicate study; writes `bayes.csv`, `rmsfe.csv` and `boxplot.csv`.
pub fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let result = replicate_study(&config.simulation)?;
    ensure_dir(out)?;
    Ok(vec![
        write_csv(out, "bayes.csv", &result.bayes)?,
        write_csv(out, "rmsfe.csv", &result.rmsfe)?,
        write_csv(out, "boxplot.csv", &result.boxplot)?,
    ])
}
