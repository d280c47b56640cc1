use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use icuda::tfcore::forward;
use icuda::uda_ref::{dann_run, ulsif_build, ulsif_gd, FeatureMap};
use icuda::DannState;
use icuda_bench::{dann_fixture, gaussian_pair, iwl_fixture, moon_pair};

fn iwl_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("iwl_forward");
    for n in [16, 32, 64] {
        let (build, h0) = iwl_fixture(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &h0, |b, h| b.iter(|| forward(&build.transformer, h).unwrap()));
    }
    g.finish();
}

fn dann_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("dann_forward");
    g.sample_size(20);
    for steps in [1, 5] {
        let (build, h0) = dann_fixture(20, steps);
        g.bench_with_input(BenchmarkId::from_parameter(steps), &h0, |b, h| b.iter(|| forward(&build.transformer, h).unwrap()));
    }
    g.finish();
}

fn references(c: &mut Criterion) {
    let pair = gaussian_pair(64, 1);
    let p = ulsif_build(&pair, FeatureMap::rbf_from_pair(&pair, 8).unwrap(), 0.1).unwrap();
    c.bench_function("ulsif_gd_10", |b| b.iter(|| ulsif_gd(&p).unwrap()));

    let moons = moon_pair(20, 1);
    let (build, _) = dann_fixture(20, 1);
    let st0: &DannState = &build.st0;
    c.bench_function("dann_reference_5", |b| b.iter(|| dann_run(&moons, st0, 5).unwrap()));
}

criterion_group!(benches, iwl_forward, dann_forward, references);
criterion_main!(benches);
