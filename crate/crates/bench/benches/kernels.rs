use ccnet::blocks::{drsm_forward, ersm_forward, BlockParams};
use ccnet::kernels::{conv2d, strip_apply, ConvSpec, StripAxis};
use ccnet::strip_attention::{ldim_forward, LdimConfig, LdimParams, DEFAULT_STRIPS};
use ccnet_bench::random_map;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    let x = random_map([1, 16, 64, 64], 0);
    for (k, groups) in [(1, 1), (3, 1), (7, 32)] {
        let cin = if groups == 1 { 16 } else { 32 };
        let x = if groups == 1 { x.clone() } else { random_map([1, 32, 64, 64], 0) };
        let w = random_map([cin, cin / groups, k, k], 1);
        let spec = ConvSpec { groups, ..ConvSpec::same(k) };
        group.bench_with_input(BenchmarkId::new(format!("k{k}_g{groups}"), cin), &x, |b, x| {
            b.iter(|| conv2d(black_box(x), &w, None, spec).unwrap())
        });
    }
    group.finish();
}

fn bench_strip(c: &mut Criterion) {
    let mut group = c.benchmark_group("strip_apply");
    let x = random_map([1, 16, 64, 64], 0);
    for k in [7, 11] {
        let weights = random_map([1, k, 64, 64], 1);
        for (axis, name) in [(StripAxis::Horizontal, "h"), (StripAxis::Vertical, "v")] {
            group.bench_function(format!("K{k}_{name}"), |b| {
                b.iter(|| strip_apply(black_box(&x), &weights, axis, (k + 1) / 2).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_blocks(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_map([1, 16, 64, 64], 0);
    let p = BlockParams::init(16, 2, 7, &mut rng);
    let cfg = LdimConfig::split(16, &DEFAULT_STRIPS).unwrap();
    let ldim = LdimParams::init(cfg.clone(), &mut rng);
    let mut group = c.benchmark_group("blocks");
    group.bench_function("ersm", |b| b.iter(|| ersm_forward(black_box(&x), &p).unwrap()));
    group.bench_function("drsm", |b| b.iter(|| drsm_forward(black_box(&x), &p).unwrap()));
    group.bench_function("ldim", |b| b.iter(|| ldim_forward(black_box(&x), &cfg, &ldim).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_conv, bench_strip, bench_blocks);
criterion_main!(benches);
