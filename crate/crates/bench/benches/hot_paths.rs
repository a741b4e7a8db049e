use std::hint::black_box;

use consac::eval::{hungarian_assign, CostMatrix};
use consac::network::{Mode, NetworkInput};
use consac::sampler::{generate_hypothesis_pool, run_consac, stream_rng, SamplerConfig, Uniform};
use consac::{Architecture, ModelInstance, ModelKind, Network, NetworkSampler, StateVector};
use consac_bench::{homography_scene, line_scene};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn residuals(c: &mut Criterion) {
    let lines = line_scene(1);
    let planes = homography_scene(1);
    let line = ModelInstance::from_params(ModelKind::Line, &[0.3, -1.0, 0.4]).unwrap();
    let h = ModelInstance::from_params(ModelKind::Homography, &[1.0, 0.02, 0.01, -0.01, 0.98, 0.03, 0.0, 0.0, 1.0]).unwrap();

    let mut group = c.benchmark_group("residuals");
    group.throughput(Throughput::Elements(lines.len() as u64));
    group.bench_function("line", |b| {
        b.iter(|| lines.observations.iter().map(|y| line.residual(y)).sum::<f64>())
    });
    group.throughput(Throughput::Elements(planes.len() as u64));
    group.bench_function("homography", |b| {
        b.iter(|| planes.observations.iter().map(|y| h.residual(y)).sum::<f64>())
    });
}

fn hypothesis_pool(c: &mut Criterion) {
    let mut group = c.benchmark_group("pool");
    for (name, scene) in [("line", line_scene(2)), ("homography", homography_scene(2))] {
        let uniform = vec![1.0 / scene.len() as f64; scene.len()];
        group.bench_function(format!("{name}-S32"), |b| {
            let mut rng = stream_rng(0, 0);
            b.iter(|| generate_hypothesis_pool(&scene.observations, &uniform, 32, scene.kind, &mut rng).unwrap())
        });
    }
}

fn conditional_sampling(c: &mut Criterion) {
    let scene = line_scene(3);
    let net = Network::new(Architecture::standard(ModelKind::Line), 0).unwrap();
    let config = SamplerConfig {
        single_samples: 4,
        multi_samples: 4,
        ..SamplerConfig::for_kind(ModelKind::Line)
    };
    let mut group = c.benchmark_group("consac");
    group.sample_size(10);
    group.bench_function("uniform-S4-P4", |b| {
        b.iter(|| run_consac(&scene.observations, scene.kind, &config, &Uniform).unwrap())
    });
    group.bench_function("network-S4-P4", |b| {
        b.iter(|| run_consac(&scene.observations, scene.kind, &config, &NetworkSampler::conditional(&net)).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let scene = line_scene(4);
    let obs = &scene.observations[..256.min(scene.len())];
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    for (name, arch) in [
        ("small", Architecture { input_dim: 2, channels: 32, blocks: 3, batch_norm: true }),
        ("standard", Architecture::standard(ModelKind::Line)),
    ] {
        let net = Network::new(arch, 0).unwrap();
        let inputs: Vec<NetworkInput> = (0..16)
            .map(|_| NetworkInput::new(obs, &StateVector::zeros(obs.len())).unwrap())
            .collect();
        group.throughput(Throughput::Elements((inputs.len() * obs.len()) as u64));
        group.bench_function(format!("{name}-forward"), |b| {
            b.iter(|| net.forward_batch(black_box(&inputs), Mode::Train, false).unwrap())
        });
        group.bench_function(format!("{name}-forward-backward"), |b| {
            b.iter(|| {
                let out = net.forward_batch(&inputs, Mode::Train, true).unwrap();
                let cache = out.cache.unwrap();
                net.backward(&cache, &vec![1e-3; inputs.len() * obs.len()]).unwrap()
            })
        });
    }
}

fn hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for n in [4usize, 16, 64] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        group.bench_function(format!("{n}x{n}"), |b| {
            b.iter_batched(
                || CostMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0)).unwrap(),
                |m| hungarian_assign(&m).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
}

criterion_group!(benches, residuals, hypothesis_pool, conditional_sampling, network, hungarian);
criterion_main!(benches);
