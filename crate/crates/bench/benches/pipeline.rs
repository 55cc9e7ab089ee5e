use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ftsgc_bench::{dependent_sample, warm_sampler};
use ftsgc_core::evidence::mhm_log_marginal;
use ftsgc_core::gibbs::{run_chain, GibbsConfig};
use ftsgc_core::model::assemble_dlm;
use ftsgc_core::statespace::{loglik, PrecisionSmoother};
use ftsgc_core::{ModelSpec, SimStudyConfig};

fn sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("gibbs_sweep");
    group.sample_size(20);
    for points in [10, 30] {
        let data = dependent_sample(100, points);
        let (sampler, state, mut rng) = warm_sampler(&data, 20);
        group.bench_with_input(BenchmarkId::from_parameter(points), &points, |b, _| {
            let mut s = state.clone();
            b.iter(|| sampler.sweep(&mut s, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn likelihood(c: &mut Criterion) {
    let mut group = c.benchmark_group("likelihood");
    group.sample_size(30);
    let data = dependent_sample(100, 30);
    let (sampler, state, _) = warm_sampler(&data, 20);
    let dlm = assemble_dlm(&state, &sampler.spec, &sampler.basis).unwrap();
    group.bench_function("kalman_filter", |b| b.iter(|| loglik(&data, &dlm).unwrap()));
    group.bench_function("banded_smoother", |b| {
        b.iter(|| PrecisionSmoother::new(&data, &dlm).unwrap().loglik())
    });
    group.finish();
}

fn evidence(c: &mut Criterion) {
    let mut group = c.benchmark_group("mhm");
    group.sample_size(10);
    let data = dependent_sample(60, 15);
    let config = GibbsConfig {
        iterations: 400,
        burn_in: Some(200),
        ..SimStudyConfig::default().gibbs
    };
    let spec = ModelSpec::unrestricted();
    let sample = run_chain(&data, &spec, &config).unwrap();
    let (sampler, _, _) = warm_sampler(&data, 0);
    group.bench_function("200_draws", |b| b.iter(|| mhm_log_marginal(&sample, &sampler).unwrap()));
    group.finish();
}

criterion_group!(benches, sweep, likelihood, evidence);
criterion_main!(benches);
