use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use duosplat_bench::{body_points, camera, colors, gaussians, upstream};
use duosplat_core::nn::Tensor;
use duosplat_core::side_enhance::nns_color_transfer;
use duosplat_core::splat::{render, render_backward};
use duosplat_core::{GaussianNet, UNetConfig};
use std::hint::black_box;

fn nns(c: &mut Criterion) {
    let mut group = c.benchmark_group("nns_color_transfer");
    for refs in [2_000, 10_000] {
        let (r, q) = (body_points(refs, 1), body_points(2_000, 2));
        let col = colors(refs);
        group.bench_with_input(BenchmarkId::from_parameter(refs), &refs, |b, _| b.iter(|| nns_color_transfer(black_box(&q), &r, &col).unwrap()));
    }
    group.finish();
}

fn splat(c: &mut Criterion) {
    let (set, cam, up) = (gaussians(8_000, 3), camera(64), upstream(64, 4));
    let bg = [0.0; 3];
    c.bench_function("render_forward_8k_64px", |b| b.iter(|| render(black_box(&set), &cam, bg).unwrap()));
    c.bench_function("render_backward_8k_64px", |b| b.iter(|| render_backward(black_box(&set), &cam, bg, &up).unwrap()));
}

fn unet(c: &mut Criterion) {
    let net = GaussianNet::new(UNetConfig::default(), 0).unwrap();
    let inputs = vec![Tensor::full(&[6, 64, 64], 0.1); 4];
    c.bench_function("unet_forward_4x64px", |b| b.iter(|| net.run(black_box(&inputs)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = nns, splat, unet
}
criterion_main!(benches);
