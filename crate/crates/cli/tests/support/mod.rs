//! Fixtures for the command-line tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;

use ftsgc_cli::ingest::write_long_csv;
use ftsgc_cli::IngestedData;
use ftsgc_core::simulate::generate;
use ftsgc_core::{Scenario, SimStudyConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Write a simulated pair (`y` driven by `x`) as a long CSV with `tau` on
/// `[0, 23]`.
pub fn write_fixture(dir: &Path, t_len: usize, points: usize, seed: u64) -> PathBuf {
    let config = SimStudyConfig {
        t_len,
        points,
        holdout: 0,
        ..SimStudyConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = generate(&config, Scenario::YDependsOnX, &mut rng).unwrap().sample;
    let original_tau = sample
        .grid
        .series
        .iter()
        .map(|g| g.points.iter().map(|p| p * 23.0).collect())
        .collect();
    let path = dir.join("data.csv");
    let file = std::fs::File::create(&path).unwrap();
    write_long_csv(&IngestedData { sample, original_tau }, file).unwrap();
    path
}

/// A small, fast chain configuration around `data`.
pub fn write_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "data = {:?}\nhorizon = 5\nforecast_draws = 20\n{extra}\n\n[gibbs]\niterations = 60\nburn_in = 20\n\n[gibbs.dims]\nj_mu = 5\nj_phi = 5\nj_psi = 4\nj_eps = 2\n",
        data.display().to_string()
    );
    std::fs::write(&path, text).unwrap();
    path
}

pub fn ftsgc(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_ftsgc")).args(args).output().unwrap()
}

pub fn ftsgc_in(command: &str, config: &Path, seed: u64, out: &Path) -> Output {
    ftsgc(&[
        command,
        "--config",
        config.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ])
}
