use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rashnet::eval::roc_auc;
use rashnet::parallel::set_parallel;
use rashnet::resnet::{BlockKind, Init, Mode, Network, NetworkConfig};
use rashnet::tensor::kernels::{conv2d_forward, ConvGeometry};
use rashnet::tensor::OptimizerState;
use rashnet::trainer::train_step;
use rashnet::Tensor;

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn random(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn conv(c: &mut Criterion) {
    let g = ConvGeometry::new([8, 32, 28, 28], [64, 32, 3, 3], 1, 1).unwrap();
    let input = random(8 * 32 * 28 * 28, 1);
    let kernel = random(64 * 32 * 9, 2);
    let mut group = c.benchmark_group("conv3x3_forward");
    for (name, on) in MODES {
        set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| conv2d_forward(&input, &kernel, None, &g))
        });
    }
    group.finish();
}

fn tiny_network(c: &mut Criterion) {
    let config = NetworkConfig::custom(BlockKind::Basic, [1, 1, 1, 1], [16, 32, 64, 128], 2, 64).unwrap();
    let net: Network<f32> = Network::build(config, Init::He { seed: 3 }).unwrap();
    let x = Tensor::new([8, 3, 64, 64], random(8 * 3 * 64 * 64, 4)).unwrap();
    let targets = [0, 1, 0, 1, 1, 0, 0, 1];

    let mut group = c.benchmark_group("tiny_resnet");
    group.sample_size(20);
    for (name, on) in MODES {
        set_parallel(on);
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| net.forward(&x, Mode::Eval).unwrap())
        });
        group.bench_function(BenchmarkId::new("train_step", name), |b| {
            let mut net = net.clone();
            let mut state = OptimizerState::new(net.params(), 0.9, 0.0);
            b.iter(|| train_step(&mut net, &mut state, &x, &targets, &[1e-3; 3]).unwrap())
        });
    }
    group.finish();
}

fn auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores: Vec<f64> = (0..20_000).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..20_000).map(|_| rng.random_bool(0.15)).collect();
    let mut group = c.benchmark_group("roc_auc");
    for (name, on) in MODES {
        set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| roc_auc(&scores, &labels).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, tiny_network, auc);
criterion_main!(benches);
