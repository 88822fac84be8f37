use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mvgnn::diffgraph::gradcheck::random_tensor;
use mvgnn::{Multivector, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mv(rng: &mut impl Rng) -> Multivector {
    Multivector::new(std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
}

fn scalar_product(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, b) = (random_mv(&mut rng), random_mv(&mut rng));
    c.bench_function("multivector/geometric_product", |bench| bench.iter(|| black_box(&a).geometric_product(black_box(&b))));
}

fn tape_ops(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("tape");
    for channels in [8usize, 16, 32] {
        let rows = 500;
        let v = random_tensor(&[rows, channels, 8], -1.0, 1.0, &mut rng);
        let w = random_tensor(&[rows, channels, 8], -1.0, 1.0, &mut rng);
        let lin = random_tensor(&[4, channels, channels], -0.5, 0.5, &mut rng);
        group.bench_with_input(BenchmarkId::new("geometric_product+backward", channels), &channels, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (a, b) = (tape.variable(v.clone()), tape.variable(w.clone()));
                let p = tape.geometric_product(a, b).unwrap();
                let s = tape.sum_all(p);
                black_box(tape.backward(s).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("mv_linear+backward", channels), &channels, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, k) = (tape.variable(v.clone()), tape.variable(lin.clone()));
                let y = tape.mv_linear(x, k).unwrap();
                let s = tape.sum_all(y);
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, scalar_product, tape_ops);
criterion_main!(benches);
