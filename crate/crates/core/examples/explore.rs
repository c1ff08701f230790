use ossd_core::*;

fn main() {
    let config = ScenarioConfig::default();
    for seed in 0..6u64 {
        let scenario = generate_scenario(&config, seed).unwrap();
        let cfg = SelfTrainConfig { seed, ..SelfTrainConfig::default() };
        let k = config.num_id_classes;
        let background = sample_background(&config, 360, seed).unwrap();
        let net = train_offline_ood(&cfg, &scenario.labeled, &background, k).unwrap();
        let probe = probe_set(&config, seed).unwrap();
        let mut feats = Vec::new(); let mut labels = Vec::new();
        for bag in &scenario.labeled { for inst in &bag.instances {
            if let Origin::IdClass(c) = inst.origin {
                feats.push(forward_hidden(&net, &inst.features).unwrap().1);
                labels.push(c);
            }}}
        let stats = fit_class_stats(&feats, &labels, k, 0.05).unwrap();
        print!("seed {seed} probe auroc:");
        for kind in [ScoreKind::Msp, ScoreKind::Iac, ScoreKind::Energy{temperature:1.0}, ScoreKind::Entropy, ScoreKind::Mahalanobis, ScoreKind::Euclidean] {
            let a = probe_ood_auroc(&net, &probe, kind, k, Some(&stats), FeatureSource::Hidden).unwrap();
            print!("  {} {:.3}", kind.name(), a);
        }
        println!();
    }
}
