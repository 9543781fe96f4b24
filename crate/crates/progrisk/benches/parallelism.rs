//! Compares the data-parallel execution path against the sequential
//! fallback on the two workloads that dominate a full run: bootstrap
//! resampling and per-member model fitting. Run with
//! `cargo bench -p progrisk` (parallel) and
//! `cargo bench -p progrisk --no-default-features` (sequential only).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use progrisk::gradnet::{self, Activation, AdamConfig, AdamState, EncoderConfig};
use progrisk::metrics::{bootstrap_ci, BootstrapParams, MetricKind};
use progrisk::seed;

fn bootstrap_records(n: usize) -> Vec<(f64, bool)> {
    let mut rng = seed::rng_for(99, "bench.bootstrap", &[n as u64]);
    (0..n)
        .map(|_| {
            let label = rng.gen_bool(0.5);
            let score: f64 = rng.gen_range(0.0..1.0) + if label { 0.3 } else { 0.0 };
            (score, label)
        })
        .collect()
}

fn bench_bootstrap(c: &mut Criterion) {
    let records = bootstrap_records(600);
    let mut group = c.benchmark_group("bootstrap_auroc_1000");
    for threads in thread_sweep() {
        group.bench_with_input(BenchmarkId::from_parameter(label(threads)), &threads, |b, &threads| {
            let params = BootstrapParams { n_resamples: 1000, level: 0.95, seed: 7, threads };
            b.iter(|| bootstrap_ci(&records, MetricKind::Auroc, &params).unwrap());
        });
    }
    group.finish();
}

fn fit_one(member: u64, inputs: &[Vec<f64>], targets: &[bool]) -> f64 {
    let config = EncoderConfig {
        input_dim: inputs[0].len(),
        hidden_dims: vec![32, 16],
        activation: Activation::Relu,
        seed: seed::derive_seed(41, "bench.fit", &[member]),
    };
    let mut model = gradnet::init_kaiming(&config).unwrap();
    let mut state = AdamState::new(AdamConfig::default(), &model);
    for _ in 0..30 {
        let mut grads = gradnet::Gradients::zeros_like(&model);
        for (x, &y) in inputs.iter().zip(targets) {
            let trace = model.forward(x).unwrap();
            let d_logit = progrisk::riskform::sigmoid(trace.logit) - f64::from(y);
            grads.accumulate(&gradnet::backward(&model, &trace, d_logit, None).unwrap());
        }
        grads.scale(1.0 / inputs.len() as f64);
        gradnet::adam_step(&mut state, &mut model, &grads).unwrap();
    }
    model.logit(&inputs[0]).unwrap()
}

fn bench_member_fits(c: &mut Criterion) {
    let mut rng = seed::rng_for(98, "bench.fit.data", &[]);
    let inputs: Vec<Vec<f64>> =
        (0..120).map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let targets: Vec<bool> = (0..120).map(|i| i % 2 == 0).collect();

    let mut group = c.benchmark_group("fit_12_members");
    group.sample_size(10);
    for threads in thread_sweep() {
        group.bench_with_input(BenchmarkId::from_parameter(label(threads)), &threads, |b, &threads| {
            b.iter(|| progrisk::exec::map_indexed(12, threads, |i| fit_one(i as u64, &inputs, &targets)));
        });
    }
    group.finish();
}

fn thread_sweep() -> Vec<usize> {
    if cfg!(feature = "parallel") {
        vec![1, 0]
    } else {
        vec![1]
    }
}

fn label(threads: usize) -> String {
    match threads {
        0 => "parallel_all_cores".into(),
        1 => "sequential".into(),
        n => format!("parallel_{n}"),
    }
}

criterion_group!(benches, bench_bootstrap, bench_member_fits);
criterion_main!(benches);
