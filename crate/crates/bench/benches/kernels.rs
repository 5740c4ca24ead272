//! Criterion benchmarks for the hot paths: convolution forward/backward,
//! a full progressive forward pass, and the SSIM objective.

use criterion::{criterion_group, criterion_main, Criterion};
use prenet_core::loss::{neg_ssim_loss, SsimSettings};
use prenet_core::net::{self, NetworkConfig};
use prenet_core::{Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(
        shape,
        (0..shape.numel()).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

fn conv_forward(c: &mut Criterion) {
    let input = rand_tensor(Shape::new(4, 32, 64, 64), 1);
    let weight = rand_tensor(Shape::new(32, 32, 3, 3), 2);
    let bias = rand_tensor(Shape::new(1, 32, 1, 1), 3);
    c.bench_function("conv3x3 forward 4x32x64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let w = tape.constant(weight.clone());
            let bv = tape.constant(bias.clone());
            black_box(tape.conv2d(x, w, Some(bv)).unwrap());
        })
    });
}

fn conv_backward(c: &mut Criterion) {
    let input = rand_tensor(Shape::new(4, 32, 64, 64), 4);
    let weight = rand_tensor(Shape::new(32, 32, 3, 3), 5);
    let bias = rand_tensor(Shape::new(1, 32, 1, 1), 6);
    c.bench_function("conv3x3 forward+backward 4x32x64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone(), true);
            let w = tape.leaf(weight.clone(), true);
            let bv = tape.leaf(bias.clone(), true);
            let out = tape.conv2d(x, w, Some(bv)).unwrap();
            let m = tape.mean(out);
            tape.backward(m).unwrap();
            black_box(tape.grad(w).unwrap());
        })
    });
}

fn full_forward(c: &mut Criterion) {
    let cfg = NetworkConfig {
        stages_t: 4,
        ..NetworkConfig::prenet()
    };
    let params = net::build::<f32>(&cfg, 7).unwrap();
    let y = rand_tensor(Shape::new(1, 3, 64, 64), 8);
    c.bench_function("prenet T=4 forward 64x64", |b| {
        b.iter(|| black_box(net::forward(&params, &cfg, &y, None).unwrap()))
    });
}

fn ssim_loss(c: &mut Criterion) {
    let settings = SsimSettings::default();
    let a = rand_tensor(Shape::new(4, 3, 64, 64), 9);
    let gt = rand_tensor(Shape::new(4, 3, 64, 64), 10);
    c.bench_function("neg-ssim forward+backward 4x3x64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let av = tape.leaf(a.clone(), true);
            let gv = tape.constant(gt.clone());
            let loss = neg_ssim_loss(&mut tape, av, gv, &settings).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.grad(av).unwrap());
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv_forward, conv_backward, full_forward, ssim_loss
}
criterion_main!(benches);
