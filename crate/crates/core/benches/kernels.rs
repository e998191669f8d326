//! Parallel vs sequential kernels.
//!
//! Each kernel runs once on the global rayon pool and once inside a
//! one-thread pool. For the pure sequential build (no rayon at all):
//!
//!     cargo bench -p qntz-core --no-default-features --bench kernels
//!
//! The `seq` rows there and here should match closely.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use qntz_core::engine::{conv_float, conv_ternary_int, ConvGeom};
use qntz_core::fixed_point::{FixedPointFormat, QTensor};
use qntz_core::ternarizer::{quantize_layer, QuantConfig};
use qntz_core::Tensor;

fn randn(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

fn variants(c: &mut Criterion, name: &str, f: impl Fn() + Sync) {
    let mut group = c.benchmark_group(name);
    group.sample_size(20);
    group.bench_function("pool", |b| b.iter(&f));
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    group.bench_function("seq", |b| b.iter(|| one.install(&f)));
    group.finish();
}

fn kernels(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&mut r, vec![4, 32, 16, 16]);
    let w = randn(&mut r, vec![64, 32, 3, 3]);

    variants(c, "conv_float", || {
        black_box(conv_float(&x, &w, None, 1, 1).unwrap());
    });

    let cfg = QuantConfig::ternary(4);
    let big = randn(&mut r, vec![256, 64, 3, 3]);
    variants(c, "quantize_layer", || {
        black_box(quantize_layer(&big, &cfg).unwrap());
    });

    let layer = quantize_layer(&w, &cfg).unwrap();
    let xq = QTensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| (v * 32.0).clamp(-128.0, 127.0) as i8).collect(),
        format: FixedPointFormat::new(-5),
    };
    let g = ConvGeom::new(32, 16, 16, 64, 3, 1, 1).unwrap();
    variants(c, "conv_ternary_int", || {
        black_box(conv_ternary_int(&xq, &layer, None, &g, 8, -10, "bench").unwrap());
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);
