//! Sequential vs data-parallel kernel comparison.
//!
//! Every kernel takes an explicit parallel flag, so one build benches both
//! paths; without the `parallel` feature the flag is inert and only the
//! sequential numbers are meaningful.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nas_core::kernels::{self, ConvGeom};

fn filled(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i * 2654435761) % 1000) as f32 / 1000.0 - 0.5).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &(m, k, n) in &[(64usize, 64usize, 64usize), (256, 128, 256)] {
        let a = filled(m * k);
        let b = filled(k * n);
        let mut out = vec![0.0f32; m * n];
        let label = format!("{}x{}x{}", m, k, n);
        group.bench_with_input(BenchmarkId::new("seq", &label), &(), |bench, _| {
            bench.iter(|| {
                kernels::mm_nn_into(false, black_box(&a), black_box(&b), &mut out, m, k, n);
                black_box(out[0]);
            })
        });
        if cfg!(feature = "parallel") {
            group.bench_with_input(BenchmarkId::new("par", &label), &(), |bench, _| {
                bench.iter(|| {
                    kernels::mm_nn_into(true, black_box(&a), black_box(&b), &mut out, m, k, n);
                    black_box(out[0]);
                })
            });
        }
    }
    group.finish();
}

fn bench_conv1d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv1d");
    for &(batch, t, dim) in &[(16usize, 64usize, 64usize), (32, 128, 64)] {
        let g = ConvGeom {
            batch,
            t_in: t,
            c_in: dim,
            c_out: dim,
            half_context: 2,
            dilation: 2,
            stride: 1,
        };
        let x = filled(batch * t * dim);
        let w = filled(g.taps() * dim * dim);
        let bias = filled(dim);
        let mut out = vec![0.0f32; batch * g.t_out() * dim];
        let label = format!("b{}t{}d{}", batch, t, dim);
        group.bench_with_input(BenchmarkId::new("seq", &label), &(), |bench, _| {
            bench.iter(|| {
                kernels::conv1d_forward_into(false, black_box(&x), black_box(&w), &bias, g, &mut out);
                black_box(out[0]);
            })
        });
        if cfg!(feature = "parallel") {
            group.bench_with_input(BenchmarkId::new("par", &label), &(), |bench, _| {
                bench.iter(|| {
                    kernels::conv1d_forward_into(true, black_box(&x), black_box(&w), &bias, g, &mut out);
                    black_box(out[0]);
                })
            });
        }
    }
    group.finish();
}

fn bench_sum(c: &mut Criterion) {
    let mut group = c.benchmark_group("sum_all");
    let a = filled(1 << 20);
    group.bench_function("seq", |bench| bench.iter(|| black_box(kernels::sum_all(false, black_box(&a)))));
    if cfg!(feature = "parallel") {
        group.bench_function("par", |bench| bench.iter(|| black_box(kernels::sum_all(true, black_box(&a)))));
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_conv1d, bench_sum);
criterion_main!(benches);
