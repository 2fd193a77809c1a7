use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use patchxfer_bench::random_map;
use patchxfer_core::matcher::{correlate, search_indices, two_stage_search};
use patchxfer_core::patch::unfold;
use patchxfer_core::PatchGeometry;

fn correlation(c: &mut Criterion) {
    let q = random_map(16, 40, 40, 1);
    let k = random_map(16, 40, 40, 2);
    let mut group = c.benchmark_group("correlate_40x40");
    group.sample_size(10);
    for (k_, s, p) in [(3, 1, 1), (6, 2, 2)] {
        let g = PatchGeometry::new(k_, s, p).unwrap();
        let (qp, kp) = (unfold(&q, &g).unwrap(), unfold(&k, &g).unwrap());
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{k_},{s},{p}")),
            &g,
            |b, _| b.iter(|| correlate(&qp, &kp).unwrap()),
        );
    }
    group.finish();
}

fn search(c: &mut Criterion) {
    let q = random_map(64, 24, 24, 3);
    let k = random_map(64, 24, 24, 4);
    let v = random_map(32, 48, 48, 5);
    let g = PatchGeometry::default_search();
    let mut group = c.benchmark_group("two_stage_24x24");
    for u in [1, 3] {
        group.bench_with_input(BenchmarkId::new("indices", u), &u, |b, &u| {
            b.iter(|| search_indices(&q, &k, &g, u).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("with_textures", u), &u, |b, &u| {
            b.iter(|| two_stage_search(&q, &k, &v, &g, u).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, correlation, search);
criterion_main!(benches);
