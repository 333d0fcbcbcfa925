use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use pc_advkit::attack::{attack_batch, AttackConfig, AttackInstance, Objective};
use pc_advkit::geometry::{estimate_normals_with, knn_with, PointCloud};
use pc_advkit::nn::{Architecture, ClassifierModel};
use pc_advkit::par::Exec;
use pc_advkit::seed;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn cloud(n: usize, s: u64) -> PointCloud {
    let mut rng = seed::rng(s);
    let pts = (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0)))
        .collect();
    PointCloud::new(pts).unwrap()
}

fn neighborhoods(c: &mut Criterion) {
    let pc = cloud(1024, 1);
    let mut g = c.benchmark_group("knn_1024_k20");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| knn_with(&pc, 20, exec)));
    }
    g.finish();
    let mut g = c.benchmark_group("normals_1024_k20");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| estimate_normals_with(&pc, 20, exec).unwrap())
        });
    }
    g.finish();
}

fn attacks(c: &mut Criterion) {
    let model = ClassifierModel::new(Architecture::arch_a(), 4, 2).unwrap();
    let instances: Vec<AttackInstance> = (0..8)
        .map(|i| AttackInstance {
            id: format!("b{i}"),
            cloud: cloud(128, 10 + i),
            target: (i % 4) as usize,
        })
        .collect();
    let cfg = AttackConfig {
        iterations: 20,
        ..AttackConfig::default()
    };
    let mut g = c.benchmark_group("ita_batch_8x128_20it");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| attack_batch(&model, &instances, &cfg, &Objective::Plain, 3, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, neighborhoods, attacks);
criterion_main!(benches);
