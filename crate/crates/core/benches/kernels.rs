use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gsam::autograd::Tape;
use gsam::layers::attention::attention_forward;
use gsam::layers::conv::{conv2d_backward_weight, conv2d_forward, ConvSpec};
use gsam::{size_sweep, Exec, FeatureMap, Model, ModelConfig, Tensor};

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = ConvSpec::same(32, 32, 3, 1);
    let x = Tensor::randn(&[4, 32, 32, 32], 1.0, &mut rng);
    let w = Tensor::randn(&spec.weight_shape(), 0.1, &mut rng);
    let g = Tensor::randn(&[4, 32, 32, 32], 1.0, &mut rng);
    let mut group = c.benchmark_group("conv3x3_32ch_32px");
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| conv2d_forward(&x, &w, None, &spec, exec).unwrap())
        });
        group.bench_function(BenchmarkId::new("weight_grad", name), |b| {
            b.iter(|| conv2d_backward_weight(&g, &x, &spec, exec).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let qkv = Tensor::randn(&[4, 256, 3 * 96], 1.0, &mut rng);
    let mut group = c.benchmark_group("attention_256tok_96d");
    for (name, exec) in modes() {
        group.bench_function(name, |b| b.iter(|| attention_forward(&qkv, 4, exec).unwrap()));
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::new(&ModelConfig::default(), 0).unwrap();
    let image = FeatureMap::new(Tensor::rand_uniform(&[4, 3, 64, 64], 0.0, 1.0, &mut rng)).unwrap();
    let labels: Vec<u8> = (0..4 * 64 * 64).map(|i| (i % 4) as u8).collect();
    let mut group = c.benchmark_group("forward_backward_b4_64px");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut tape = Tape::with_exec(exec);
                let y = model.forward_tape(&mut tape, &image).unwrap();
                let loss = tape.cross_entropy(y, &labels).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let config = ModelConfig::default();
    let sizes: Vec<(usize, usize)> = (1..=16).map(|i| (32 * i, 32 * i)).collect();
    c.bench_function("size_sweep_16", |b| b.iter(|| size_sweep(&config, &sizes).unwrap()));
}

criterion_group!(benches, conv, attention, train_step, sweep);
criterion_main!(benches);
