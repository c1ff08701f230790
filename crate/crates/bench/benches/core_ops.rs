use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use ossd_bench::{bench_scenario, bench_scorer, unlabeled_features};
use ossd_core::*;

fn bench_metrics(c: &mut Criterion) {
    let id: Vec<f64> = (0..5000).map(|i| ((i * 7919) % 1000) as f64 / 250.0).collect();
    let ood: Vec<f64> = (0..5000).map(|i| ((i * 104729) % 1000) as f64 / 300.0).collect();
    c.bench_function("auroc_5k_vs_5k", |b| {
        b.iter(|| auroc(black_box(&id), black_box(&ood)).unwrap())
    });
    c.bench_function("fpr_at_tnr95_5k", |b| {
        b.iter(|| fpr_at_tnr(black_box(&id), black_box(&ood), 0.95).unwrap())
    });
}

fn bench_scores(c: &mut Criterion) {
    let scenario = bench_scenario(1);
    let (net, stats) = bench_scorer(&scenario);
    let features = unlabeled_features(&scenario);
    let k = scenario.config.num_id_classes;
    let mut group = c.benchmark_group("score_batch");
    for kind in [
        ScoreKind::Msp,
        ScoreKind::Iac,
        ScoreKind::Energy { temperature: 1.0 },
        ScoreKind::Entropy,
        ScoreKind::Mahalanobis,
        ScoreKind::Euclidean,
    ] {
        group.bench_function(kind.name(), |b| {
            b.iter(|| {
                score_batch(
                    black_box(kind),
                    black_box(&features),
                    &net,
                    k,
                    Some(&stats),
                    FeatureSource::Hidden,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_gradients(c: &mut Criterion) {
    let params = init_params(8, 32, 4, 9, 0.5).unwrap();
    let scenario = bench_scenario(2);
    let features = unlabeled_features(&scenario);
    let batch: Vec<(&[f64], usize, f64)> = features
        .iter()
        .take(64)
        .enumerate()
        .map(|(i, x)| (x.as_slice(), i % 4, 1.0))
        .collect();
    c.bench_function("ce_loss_and_grad_batch64", |b| {
        b.iter(|| ce_loss_and_grad(black_box(&params), black_box(&batch)).unwrap())
    });
}

fn bench_generation(c: &mut Criterion) {
    let config = ScenarioConfig::default();
    c.bench_function("generate_default_scenario", |b| {
        b.iter(|| generate_scenario(black_box(&config), black_box(7)).unwrap())
    });
}

criterion_group!(
    benches,
    bench_metrics,
    bench_scores,
    bench_gradients,
    bench_generation
);
criterion_main!(benches);
