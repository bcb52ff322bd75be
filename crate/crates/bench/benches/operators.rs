use comptom_bench::sphere_fixture;
use comptom_core::{adjoint, forward, riesz_precondition};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn transform(c: &mut Criterion) {
    let mut group = c.benchmark_group("cone_transform");
    group.sample_size(10);
    for n in [16, 24] {
        let fx = sphere_fixture(n);
        group.bench_with_input(BenchmarkId::new("forward", n), &fx, |b, fx| {
            b.iter(|| forward(&fx.f, &fx.layout, &fx.weight, &fx.quad).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("adjoint", n), &fx, |b, fx| {
            b.iter(|| adjoint(&fx.g, &fx.volume, &fx.weight, &fx.quad).unwrap())
        });
    }
    group.finish();
}

fn preconditioner(c: &mut Criterion) {
    let fx = sphere_fixture(32);
    c.bench_function("riesz_precondition 32^3", |b| b.iter(|| riesz_precondition(&fx.f, 1.0)));
}

criterion_group!(benches, transform, preconditioner);
criterion_main!(benches);
