use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pcaug_core::bilevel::{bilevel_step, BilevelConfig, BilevelState, CloudProblem};
use pcaug_core::dataset::{self, SyntheticConfig};
use pcaug_core::seeds::{self, Purpose};
use pcaug_core::{Augmentor, AugmentorKind, AugmentorSpec, Classifier, ClassifierConfig, PointCloud, Tape};

fn batch() -> Vec<PointCloud<f32>> {
    let cfg = SyntheticConfig {
        per_class: 6,
        ..SyntheticConfig::default()
    };
    dataset::generate_pool::<f32>(&cfg, 6, Purpose::TrainPool).unwrap()[..24].to_vec()
}

fn classifier(c: &mut Criterion) {
    let clf = Classifier::new(ClassifierConfig::new(4)).unwrap();
    let omega = clf.init_params::<f32>(&mut seeds::rng(0, Purpose::Init, 0));
    let clouds = batch();
    let refs: Vec<&PointCloud<f32>> = clouds.iter().collect();
    c.bench_function("classifier loss+backward, 24x128", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let vars = omega.register(&mut tape, true);
            let loss = clf.val_loss(&mut tape, &vars, &refs).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn augmentor(c: &mut Criterion) {
    let aug = Augmentor::new(AugmentorSpec::new(AugmentorKind::Neural, "S,T,R".parse().unwrap())).unwrap();
    let phi = aug.init_params::<f32>(&mut seeds::rng(0, Purpose::Init, 1));
    let clouds = batch();
    let refs: Vec<&PointCloud<f32>> = clouds.iter().collect();
    let mut rng = seeds::rng(0, Purpose::Training, 0);
    c.bench_function("neural augmentor sample+apply, 24x128", |b| {
        b.iter(|| {
            let noise = aug.draw_noise::<f32>(&[128; 24], &mut rng);
            let mut tape = Tape::new();
            let vars = phi.register(&mut tape, true);
            let theta = aug.sample_theta(&mut tape, &vars, &noise).unwrap();
            black_box(aug.augment(&mut tape, &theta, &refs, &noise).unwrap());
        })
    });
}

fn bilevel(c: &mut Criterion) {
    let clf = Classifier::new(ClassifierConfig::new(4)).unwrap();
    let aug = Augmentor::new(AugmentorSpec::new(AugmentorKind::Neural, "R".parse().unwrap())).unwrap();
    let config = BilevelConfig::default();
    let mut state = BilevelState::new(
        clf.init_params::<f32>(&mut seeds::rng(0, Purpose::Init, 0)),
        aug.init_params::<f32>(&mut seeds::rng(0, Purpose::Init, 1)),
        &config,
    );
    let problem = CloudProblem {
        classifier: &clf,
        augmentor: Some(&aug),
    };
    let train = batch();
    let val = train[..16].to_vec();
    let mut rng = seeds::rng(0, Purpose::Training, 0);
    let mut group = c.benchmark_group("bilevel");
    group.sample_size(20);
    group.bench_function("one step with hypergradient, batch 24", |b| {
        b.iter(|| black_box(bilevel_step(&problem, &mut state, &train, &val, &config, &mut rng).unwrap().train_loss))
    });
    group.finish();
}

fn data(c: &mut Criterion) {
    let cfg = SyntheticConfig::default();
    let mut group = c.benchmark_group("dataset");
    group.sample_size(10);
    group.bench_function("generate default pool and test set", |b| {
        b.iter(|| black_box(dataset::generate::<f32>(&cfg).unwrap().0.len()))
    });
    group.finish();
}

criterion_group!(benches, classifier, augmentor, bilevel, data);
criterion_main!(benches);
