//! Run configuration read from TOML or JSON; keys are the field names.

use std::path::{Path, PathBuf};

use ftsgc_core::{GibbsConfig, Hypothesis, SimStudyConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Long CSV with header `series_id,time_index,tau,value`. Relative paths
    /// are resolved against the config file's directory.
    pub data: Option<PathBuf>,
    /// Response series `Y`; defaults to the first series in the file.
    pub response: Option<String>,
    /// Candidate cause `X`; defaults to the second series in the file.
    pub cause: Option<String>,
    /// Series holding vector-valued observations; `tau` indexes components.
    pub vector_series: Vec<String>,
    /// Model fitted by `fit` and `forecast`.
    pub hypothesis: Hypothesis,
    pub gibbs: GibbsConfig,
    /// Stop `fit` after this many sweeps, leaving a resumable checkpoint.
    pub stop_after: Option<usize>,
    /// Checkpoint written by an earlier `fit` to continue from.
    pub resume: Option<PathBuf>,
    /// Forecast horizon in time steps.
    pub horizon: usize,
    /// Posterior draws propagated by `forecast`, evenly thinned.
    pub forecast_draws: usize,
    pub simulation: SimStudyConfig,
    /// Overridden by `--seed`.
    pub seed: u64,
    /// Overridden by `--out`.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            response: None,
            cause: None,
            vector_series: Vec::new(),
            hypothesis: Hypothesis::Unrestricted,
            gibbs: GibbsConfig::default(),
            stop_after: None,
            resume: None,
            horizon: 5,
            forecast_draws: 100,
            simulation: SimStudyConfig::default(),
            seed: 1,
            out: None,
        }
    }
}

impl RunConfig {
    /// Parse by extension: `.json` as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io("load_config", path, e))?;
        let bad = |reason: String| CliError::Config {
            path: path.to_path_buf(),
            reason,
        };
        let mut config: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?,
            _ => toml::from_str(&text).map_err(|e| bad(e.to_string()))?,
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.data, &mut config.resume].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// Apply the command-line seed everywhere randomness is drawn.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.gibbs.seed = self.seed;
        self.simulation.seed = self.seed;
        self
    }

    pub fn data_path(&self, op: &'static str) -> Result<&Path> {
        let path = self
            .data
            .as_deref()
            .ok_or_else(|| CliError::invalid(op, "`data` is required for this subcommand"))?;
        if !path.is_file() {
            return Err(CliError::invalid(op, format!("data file {} does not exist", path.display())));
        }
        Ok(path)
    }

    pub fn validate(&self, op: &'static str) -> Result<()> {
        self.gibbs.validate()?;
        if self.horizon == 0 || self.forecast_draws == 0 {
            return Err(CliError::invalid(op, "horizon and forecast_draws must be at least 1"));
        }
        if let Some(s) = self.stop_after {
            if s == 0 || s > self.gibbs.iterations {
                return Err(CliError::invalid(op, "stop_after must lie in 1..=iterations"));
            }
        }
        if let Some(p) = &self.resume {
            if !p.is_file() {
                return Err(CliError::invalid(op, format!("checkpoint {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
