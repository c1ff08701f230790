//! Shared fixtures for the benchmark targets.

use ossd_core::*;

/// A small scenario sized for benchmarking single operations.
pub fn bench_scenario(seed: u64) -> Scenario {
    let config = ScenarioConfig {
        n_labeled_bags: 30,
        n_unlabeled_pure_id: 60,
        n_unlabeled_mixed: 60,
        n_unlabeled_pure_ood: 60,
        n_test_per_class: 50,
        ..ScenarioConfig::default()
    };
    generate_scenario(&config, seed).expect("bench scenario")
}

/// A trained K+1 scorer plus hidden-feature statistics for distance scores.
pub fn bench_scorer(scenario: &Scenario) -> (ClassifierParams, ClassStats) {
    let k = scenario.config.num_id_classes;
    let cfg = SelfTrainConfig {
        iters_ood: 200,
        seed: scenario.seed,
        ..SelfTrainConfig::default()
    };
    let background = sample_background(&scenario.config, 256, scenario.seed).expect("background");
    let net = train_offline_ood(&cfg, &scenario.labeled, &background, k).expect("ood net");
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for bag in &scenario.labeled {
        for inst in &bag.instances {
            if let Origin::IdClass(class) = inst.origin {
                features.push(forward_hidden(&net, &inst.features).expect("forward").1);
                labels.push(class);
            }
        }
    }
    let stats = fit_class_stats(&features, &labels, k, 0.05).expect("stats");
    (net, stats)
}

/// Unlabeled instance features, flattened.
pub fn unlabeled_features(scenario: &Scenario) -> Vec<Vec<f64>> {
    scenario
        .unlabeled
        .iter()
        .flat_map(|b| b.instances.iter().map(|i| i.features.clone()))
        .collect()
}
