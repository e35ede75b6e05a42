use ccnet::backbone::{forward_multiscale, BlockKind};
use ccnet::data::{Dataset, DegradationKind};
use ccnet::train::{sample_batch, TrainConfig, Trainer};
use ccnet_bench::{desk_model, random_image};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn bench_forward(c: &mut Criterion) {
    let x = random_image([1, 3, 64, 64], 0);
    let mut group = c.benchmark_group("forward_64");
    for (name, block, ldim) in [
        ("plain", BlockKind::Plain, false),
        ("ersm", BlockKind::Ersm, false),
        ("ersm_ldim", BlockKind::Ersm, true),
    ] {
        let model = desk_model(block, ldim);
        group.bench_function(name, |b| b.iter(|| forward_multiscale(&model, black_box(&x)).unwrap()));
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let data = Dataset::synthesize(DegradationKind::Haze, 64, 64, 4, 0).unwrap();
    let cfg = TrainConfig {
        iterations: usize::MAX,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("sample_batch", |b| b.iter(|| sample_batch(&data, &cfg, black_box(3)).unwrap()));
    let mut trainer = Trainer::new(desk_model(BlockKind::Ersm, true), cfg).unwrap();
    group.bench_function("step_desk_64", |b| b.iter(|| trainer.step(&data).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_forward, bench_train_step);
criterion_main!(benches);
