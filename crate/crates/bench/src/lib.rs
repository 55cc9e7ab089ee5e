//! Fixtures shared by the benchmarks: a simulated dependent pair and a
//! warmed-up sampler state.

use ftsgc_core::gibbs::{initialize, Sampler};
use ftsgc_core::simulate::generate;
use ftsgc_core::{FunctionalSample, ModelSpec, ParameterState, Scenario, SimStudyConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A dependent-scenario sample with `t_len` times and `points` per curve.
pub fn dependent_sample(t_len: usize, points: usize) -> FunctionalSample {
    let config = SimStudyConfig {
        t_len,
        points,
        holdout: 0,
        ..SimStudyConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    generate(&config, Scenario::YDependsOnX, &mut rng).expect("valid study config").sample
}

/// Sampler and state after `sweeps` Gibbs sweeps of the unrestricted model.
pub fn warm_sampler(data: &FunctionalSample, sweeps: usize) -> (Sampler<'_>, ParameterState, ChaCha8Rng) {
    let dims = SimStudyConfig::default().gibbs.dims;
    let sampler = Sampler::new(data, &ModelSpec::unrestricted(), &dims, 1.0).expect("valid dims");
    let mut state = initialize(&sampler).expect("initialization");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..sweeps {
        sampler.sweep(&mut state, &mut rng).expect("sweep");
    }
    (sampler, state, rng)
}
