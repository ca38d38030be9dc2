use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use petkit::data::gen_synthetic_dataset;
use petkit::graph::BackwardFault;
use petkit::train::{accuracy, batch_gradient, ExperimentSpec};
use petkit::{BackboneConfig, Execution, PetStrategy, SyntheticTaskSpec};

fn bench_batches(c: &mut Criterion) {
    let data = gen_synthetic_dataset(&SyntheticTaskSpec {
        n_classes: 10,
        samples_per_class: 20,
        wave_length: 400,
        snr_db: 30.0,
        seed: 0,
    })
    .unwrap();
    let config = BackboneConfig::mini();
    let exp = ExperimentSpec {
        backbone_name: "mini".into(),
        backbone: config.clone(),
        backbone_seed: 0,
        strategy: PetStrategy::chapter(&config),
    };
    let model = exp.build(10, 0).unwrap();
    let batch: Vec<_> = data.train.iter().take(32).collect();

    let mut group = c.benchmark_group("batch_gradient_32");
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_function(name, |b| {
            b.iter(|| batch_gradient(black_box(&model), &batch, exec, BackwardFault::None).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("accuracy_160");
    let all: Vec<_> = data.train.iter().collect();
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_function(name, |b| b.iter(|| accuracy(black_box(&model), &all, exec).unwrap()));
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_batches
}
criterion_main!(benches);
