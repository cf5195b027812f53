//! Microbenchmarks for the graph ops that dominate training time.

use criterion::{criterion_group, criterion_main, Criterion};
use goalloop_core::rng::StreamRng;
use goalloop_core::tensor::Tensor;
use goalloop_core::Graph;

fn rand_tensor(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n)).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = StreamRng::derive(1, "bench/matmul", 0);
    // Transformer projection shape: [tokens, width] x [width, width].
    let a = rand_tensor(&mut rng, &[256, 128]);
    let b = rand_tensor(&mut rng, &[128, 128]);
    c.bench_function("matmul_256x128x128", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let va = g.input(a.clone());
            let vb = g.input(b.clone());
            let out = g.matmul(va, vb).unwrap();
            std::hint::black_box(g.value(out).data()[0])
        })
    });
}

fn bench_matmul_backward(c: &mut Criterion) {
    let mut rng = StreamRng::derive(1, "bench/matmul_bwd", 0);
    let a = rand_tensor(&mut rng, &[256, 128]);
    let b = rand_tensor(&mut rng, &[128, 128]);
    c.bench_function("matmul_fwd_bwd_256x128x128", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let va = g.param(a.clone());
            let vb = g.param(b.clone());
            let out = g.matmul(va, vb).unwrap();
            let loss = g.sum_all(out).unwrap();
            let grads = g.backward(loss).unwrap();
            std::hint::black_box(grads.get(va).unwrap().data()[0])
        })
    });
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = StreamRng::derive(1, "bench/conv", 0);
    // First downsampling conv of the frame encoder.
    let x = rand_tensor(&mut rng, &[8, 3, 32, 32]);
    let w = rand_tensor(&mut rng, &[16, 3, 3, 3]);
    c.bench_function("conv2d_8x3x32x32_s2", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let vx = g.input(x.clone());
            let vw = g.input(w.clone());
            let out = g.conv2d(vx, vw, (2, 2), ((1, 1), (1, 1))).unwrap();
            std::hint::black_box(g.value(out).data()[0])
        })
    });
}

fn bench_softmax(c: &mut Criterion) {
    let mut rng = StreamRng::derive(1, "bench/softmax", 0);
    // Attention-score shape: heads x query rows over 64 keys.
    let x = rand_tensor(&mut rng, &[4, 256, 64]);
    c.bench_function("softmax_4x256x64", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let vx = g.input(x.clone());
            let out = g.softmax(vx).unwrap();
            std::hint::black_box(g.value(out).data()[0])
        })
    });
}

fn bench_layer_norm(c: &mut Criterion) {
    let mut rng = StreamRng::derive(1, "bench/ln", 0);
    let x = rand_tensor(&mut rng, &[256, 128]);
    c.bench_function("layer_norm_256x128", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let vx = g.input(x.clone());
            let out = g.layer_norm(vx, 1e-5).unwrap();
            std::hint::black_box(g.value(out).data()[0])
        })
    });
}

criterion_group!(
    kernels,
    bench_matmul,
    bench_matmul_backward,
    bench_conv2d,
    bench_softmax,
    bench_layer_norm
);
criterion_main!(kernels);
