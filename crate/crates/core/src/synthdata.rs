//! Deterministic synthetic open-set scenarios.
//!
//! An image with multiple objects is modeled as a bag of feature-space
//! instances. ID classes and OOD clusters are isotropic Gaussians whose means
//! sit on a common sphere; background samples are uniform draws over a wide
//! hypercube enclosing all clusters. The unlabeled pool is split into
//! pure-ID, mixed, and pure-OOD bags; the labeled set is drawn from pure-ID
//! bags only.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::euclidean_distance;
use crate::rng::{stream, stream_rng};

/// Ground-truth provenance of an instance. Visible to metrics and labeled-set
/// construction only; training and scoring on unlabeled data never read it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    IdClass(usize),
    OodClass(usize),
    Background,
}

impl Origin {
    pub fn is_id(&self) -> bool {
        matches!(self, Origin::IdClass(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BagKind {
    PureId,
    Mixed,
    PureOod,
}

/// A nonempty collection of instances standing in for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub instances: Vec<Instance>,
}

impl Bag {
    pub fn kind(&self) -> Result<BagKind> {
        bag_kind(self)
    }
}

/// Kind from composition: background instances are ignored; a bag with both
/// ID and OOD instances is mixed.
pub fn bag_kind(bag: &Bag) -> Result<BagKind> {
    if bag.instances.is_empty() {
        return Err(Error::EmptyInput("bag"));
    }
    let mut has_id = false;
    let mut has_ood = false;
    for inst in &bag.instances {
        match inst.origin {
            Origin::IdClass(_) => has_id = true,
            Origin::OodClass(_) => has_ood = true,
            Origin::Background => {}
        }
    }
    match (has_id, has_ood) {
        (true, true) => Ok(BagKind::Mixed),
        (true, false) => Ok(BagKind::PureId),
        (false, true) => Ok(BagKind::PureOod),
        (false, false) => Err(Error::EmptyInput("bag with only background instances")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Feature dimension.
    pub d: usize,
    /// Number of ID classes (K).
    pub num_id_classes: usize,
    /// Number of OOD clusters (M).
    pub num_ood_clusters: usize,
    /// Cluster means are sampled on a sphere of this radius.
    pub mean_radius: f64,
    /// Per-class isotropic standard deviation.
    pub class_spread: f64,
    /// Half-width of the uniform background hypercube.
    pub background_box: f64,
    pub n_labeled_bags: usize,
    pub n_unlabeled_pure_id: usize,
    pub n_unlabeled_mixed: usize,
    pub n_unlabeled_pure_ood: usize,
    pub bag_size_min: usize,
    pub bag_size_max: usize,
    pub n_test_per_class: usize,
}

impl Default for ScenarioConfig {
    /// The desk-scale default scenario used by the acceptance runs.
    fn default() -> Self {
        ScenarioConfig {
            d: 8,
            num_id_classes: 3,
            num_ood_clusters: 3,
            mean_radius: 4.0,
            class_spread: 1.0,
            background_box: 10.0,
            n_labeled_bags: 60,
            n_unlabeled_pure_id: 300,
            n_unlabeled_mixed: 300,
            n_unlabeled_pure_ood: 300,
            bag_size_min: 1,
            bag_size_max: 5,
            n_test_per_class: 200,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(invalid("d", format!("must be >= 2, got {}", self.d)));
        }
        if self.num_id_classes < 2 {
            return Err(invalid(
                "k",
                format!("must be >= 2, got {}", self.num_id_classes),
            ));
        }
        if self.bag_size_min < 1 {
            return Err(invalid("bag_size_min", "must be >= 1".into()));
        }
        if self.bag_size_max < self.bag_size_min {
            return Err(invalid(
                "bag_size_max",
                format!(
                    "must be >= bag_size_min ({}), got {}",
                    self.bag_size_min, self.bag_size_max
                ),
            ));
        }
        if self.n_unlabeled_mixed > 0 && self.bag_size_max < 2 {
            return Err(invalid(
                "bag_size_max",
                "mixed bags need at least 2 instances".into(),
            ));
        }
        if self.num_ood_clusters == 0
            && (self.n_unlabeled_mixed > 0 || self.n_unlabeled_pure_ood > 0)
        {
            return Err(invalid(
                "m",
                "OOD bags requested but there are no OOD clusters".into(),
            ));
        }
        for (field, value) in [
            ("mean_radius", self.mean_radius),
            ("background_box", self.background_box),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(invalid(field, format!("must be finite and > 0, got {value}")));
            }
        }
        if !(self.class_spread >= 0.0) || !self.class_spread.is_finite() {
            return Err(invalid(
                "class_spread",
                format!("must be finite and >= 0, got {}", self.class_spread),
            ));
        }
        Ok(())
    }
}

fn invalid(field: &'static str, message: String) -> Error {
    Error::InvalidConfig { field, message }
}

/// A full open-set scenario: labeled pure-ID bags, an unlabeled pool with
/// hidden labels, and a labeled test set of ID instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub labeled: Vec<Bag>,
    pub unlabeled: Vec<Bag>,
    pub test: Vec<Instance>,
    pub config: ScenarioConfig,
    pub seed: u64,
}

/// Number of ID and OOD instances in the fixed per-scenario probe set.
pub const PROBE_PER_SIDE: usize = 200;

/// Unit vector scaled to the sphere radius, via a normalized Gaussian draw.
fn sphere_point(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x * radius / norm).collect();
        }
    }
}

/// ID and OOD cluster means, derived from (config, seed) alone so that
/// holders of a scenario can re-derive them (e.g. for probe sets).
///
/// OOD means are drawn from the same sphere as ID means, rejecting draws
/// closer than `class_spread` to any ID mean.
pub fn sample_cluster_means(
    config: &ScenarioConfig,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    config.validate()?;
    let mut rng = stream_rng(seed, stream::SCENARIO_MEANS);
    let id_means: Vec<Vec<f64>> = (0..config.num_id_classes)
        .map(|_| sphere_point(&mut rng, config.d, config.mean_radius))
        .collect();
    let mut ood_means = Vec::with_capacity(config.num_ood_clusters);
    for _ in 0..config.num_ood_clusters {
        let mut attempts = 0;
        loop {
            let cand = sphere_point(&mut rng, config.d, config.mean_radius);
            let ok = id_means
                .iter()
                .all(|m| euclidean_distance(m, &cand) >= config.class_spread)
                && ood_means
                    .iter()
                    .all(|m: &Vec<f64>| euclidean_distance(m, &cand) > 0.0);
            if ok {
                ood_means.push(cand);
                break;
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(invalid(
                    "class_spread",
                    "cannot place OOD cluster means on the sphere outside the \
                     rejection radius"
                        .into(),
                ));
            }
        }
    }
    // Pairwise-distinct check across the full mean set.
    let all: Vec<&Vec<f64>> = id_means.iter().chain(ood_means.iter()).collect();
    for i in 0..all.len() {
        for j in (i + 1)..all.len() {
            if euclidean_distance(all[i], all[j]) == 0.0 {
                return Err(invalid("mean_radius", "coincident cluster means".into()));
            }
        }
    }
    Ok((id_means, ood_means))
}

fn gaussian_instance(rng: &mut ChaCha8Rng, mean: &[f64], spread: f64, origin: Origin) -> Instance {
    let features = mean
        .iter()
        .map(|m| m + spread * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Instance { features, origin }
}

fn sample_bag(
    rng: &mut ChaCha8Rng,
    config: &ScenarioConfig,
    id_means: &[Vec<f64>],
    ood_means: &[Vec<f64>],
    kind: BagKind,
) -> Bag {
    let min = match kind {
        BagKind::Mixed => config.bag_size_min.max(2),
        _ => config.bag_size_min,
    };
    let size = rng.gen_range(min..=config.bag_size_max);
    let n_id = match kind {
        BagKind::PureId => size,
        BagKind::PureOod => 0,
        BagKind::Mixed => rng.gen_range(1..size),
    };
    let mut instances = Vec::with_capacity(size);
    for _ in 0..n_id {
        let k = rng.gen_range(0..config.num_id_classes);
        instances.push(gaussian_instance(
            rng,
            &id_means[k],
            config.class_spread,
            Origin::IdClass(k),
        ));
    }
    for _ in n_id..size {
        let m = rng.gen_range(0..config.num_ood_clusters);
        instances.push(gaussian_instance(
            rng,
            &ood_means[m],
            config.class_spread,
            Origin::OodClass(m),
        ));
    }
    Bag { instances }
}

/// Builds the labeled/unlabeled/test partitions with exactly the configured
/// counts. Bit-identical output for identical (config, seed).
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    let (id_means, ood_means) = sample_cluster_means(config, seed)?;

    let mut labeled_rng = stream_rng(seed, stream::SCENARIO_LABELED);
    let labeled: Vec<Bag> = (0..config.n_labeled_bags)
        .map(|_| {
            sample_bag(
                &mut labeled_rng,
                config,
                &id_means,
                &ood_means,
                BagKind::PureId,
            )
        })
        .collect();

    let mut unlabeled_rng = stream_rng(seed, stream::SCENARIO_UNLABELED);
    let mut unlabeled = Vec::with_capacity(
        config.n_unlabeled_pure_id + config.n_unlabeled_mixed + config.n_unlabeled_pure_ood,
    );
    for (count, kind) in [
        (config.n_unlabeled_pure_id, BagKind::PureId),
        (config.n_unlabeled_mixed, BagKind::Mixed),
        (config.n_unlabeled_pure_ood, BagKind::PureOod),
    ] {
        for _ in 0..count {
            unlabeled.push(sample_bag(
                &mut unlabeled_rng,
                config,
                &id_means,
                &ood_means,
                kind,
            ));
        }
    }

    let mut test_rng = stream_rng(seed, stream::SCENARIO_TEST);
    let mut test = Vec::with_capacity(config.num_id_classes * config.n_test_per_class);
    for k in 0..config.num_id_classes {
        for _ in 0..config.n_test_per_class {
            test.push(gaussian_instance(
                &mut test_rng,
                &id_means[k],
                config.class_spread,
                Origin::IdClass(k),
            ));
        }
    }

    Ok(Scenario {
        labeled,
        unlabeled,
        test,
        config: config.clone(),
        seed,
    })
}

/// `n` background instances drawn uniformly from the hypercube
/// [-background_box, +background_box]^d.
pub fn sample_background(config: &ScenarioConfig, n: usize, seed: u64) -> Result<Vec<Instance>> {
    config.validate()?;
    let mut rng = stream_rng(seed, stream::BACKGROUND);
    let b = config.background_box;
    Ok((0..n)
        .map(|_| Instance {
            features: (0..config.d).map(|_| rng.gen_range(-b..=b)).collect(),
            origin: Origin::Background,
        })
        .collect())
}

/// The fixed held-out probe set for checkpoint AUROC: `PROBE_PER_SIDE`
/// ID instances and the same number of OOD instances, a pure function of
/// (config, seed).
pub fn probe_set(config: &ScenarioConfig, seed: u64) -> Result<Vec<Instance>> {
    let (id_means, ood_means) = sample_cluster_means(config, seed)?;
    let mut rng = stream_rng(seed, stream::SCENARIO_PROBE);
    let mut probe = Vec::with_capacity(2 * PROBE_PER_SIDE);
    for i in 0..PROBE_PER_SIDE {
        let k = i % config.num_id_classes;
        probe.push(gaussian_instance(
            &mut rng,
            &id_means[k],
            config.class_spread,
            Origin::IdClass(k),
        ));
    }
    if !ood_means.is_empty() {
        for i in 0..PROBE_PER_SIDE {
            let m = i % config.num_ood_clusters;
            probe.push(gaussian_instance(
                &mut rng,
                &ood_means[m],
                config.class_spread,
                Origin::OodClass(m),
            ));
        }
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bag_kind_rule_table() {
        let id = |k| Instance {
            features: vec![0.0, 0.0],
            origin: Origin::IdClass(k),
        };
        let ood = |m| Instance {
            features: vec![0.0, 0.0],
            origin: Origin::OodClass(m),
        };
        let bg = Instance {
            features: vec![0.0, 0.0],
            origin: Origin::Background,
        };
        let kind = |insts: Vec<Instance>| bag_kind(&Bag { instances: insts }).unwrap();
        assert_eq!(kind(vec![id(0), id(1)]), BagKind::PureId);
        assert_eq!(kind(vec![id(0), ood(1)]), BagKind::Mixed);
        // Background is ignored when deciding the kind.
        assert_eq!(kind(vec![ood(0), bg.clone()]), BagKind::PureOod);
        assert_eq!(kind(vec![id(0), bg]), BagKind::PureId);
        assert!(bag_kind(&Bag { instances: vec![] }).is_err());
    }

    #[test]
    fn scenario_counts_and_kinds() {
        let config = ScenarioConfig {
            num_id_classes: 3,
            n_unlabeled_pure_id: 10,
            n_unlabeled_mixed: 10,
            n_unlabeled_pure_ood: 10,
            n_labeled_bags: 5,
            n_test_per_class: 4,
            ..ScenarioConfig::default()
        };
        let s = generate_scenario(&config, 3).unwrap();
        assert_eq!(s.labeled.len(), 5);
        assert_eq!(s.unlabeled.len(), 30);
        assert_eq!(s.test.len(), 12);

        // Enumeration oracle over the kind histogram.
        let mut hist = [0usize; 3];
        for bag in &s.unlabeled {
            match bag.kind().unwrap() {
                BagKind::PureId => hist[0] += 1,
                BagKind::Mixed => hist[1] += 1,
                BagKind::PureOod => hist[2] += 1,
            }
        }
        assert_eq!(hist, [10, 10, 10]);
    }

    #[test]
    fn no_mixed_bags_when_count_zero() {
        let config = ScenarioConfig {
            n_unlabeled_mixed: 0,
            n_unlabeled_pure_id: 20,
            n_unlabeled_pure_ood: 20,
            ..ScenarioConfig::default()
        };
        let s = generate_scenario(&config, 7).unwrap();
        assert!(s
            .unlabeled
            .iter()
            .all(|b| b.kind().unwrap() != BagKind::Mixed));
    }

    #[test]
    fn labeled_bags_are_pure_id() {
        let s = generate_scenario(&ScenarioConfig::default(), 11).unwrap();
        for bag in &s.labeled {
            assert_eq!(bag.kind().unwrap(), BagKind::PureId);
            assert!(bag
                .instances
                .iter()
                .all(|i| matches!(i.origin, Origin::IdClass(_))));
        }
    }

    #[test]
    fn scenario_is_deterministic() {
        let config = ScenarioConfig::default();
        let a = generate_scenario(&config, 42).unwrap();
        let b = generate_scenario(&config, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_scenario(&config, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cluster_means_are_separated() {
        let config = ScenarioConfig::default();
        for seed in 0..20 {
            let (id, ood) = sample_cluster_means(&config, seed).unwrap();
            let all: Vec<&Vec<f64>> = id.iter().chain(ood.iter()).collect();
            for i in 0..all.len() {
                for j in (i + 1)..all.len() {
                    assert!(euclidean_distance(all[i], all[j]) > 0.0);
                }
            }
            for m in &ood {
                for k in &id {
                    assert!(euclidean_distance(m, k) >= config.class_spread);
                }
            }
        }
    }

    #[test]
    fn background_zero_count_and_range() {
        let config = ScenarioConfig::default();
        assert!(sample_background(&config, 0, 1).unwrap().is_empty());
        let bg = sample_background(&config, 500, 1).unwrap();
        for inst in &bg {
            assert_eq!(inst.origin, Origin::Background);
            assert!(inst
                .features
                .iter()
                .all(|f| f.abs() <= config.background_box));
        }
    }

    #[test]
    fn background_mean_near_zero() {
        // Monte-Carlo check: the empirical mean of 10,000 uniform draws stays
        // within 3 standard errors of the zero vector per component.
        let config = ScenarioConfig::default();
        let n = 10_000;
        let bg = sample_background(&config, n, 5).unwrap();
        let se = config.background_box / (3.0f64).sqrt() / (n as f64).sqrt();
        for j in 0..config.d {
            let mean: f64 = bg.iter().map(|i| i.features[j]).sum::<f64>() / n as f64;
            assert!(
                mean.abs() <= 3.0 * se,
                "component {j} mean {mean} exceeds 3 SE ({})",
                3.0 * se
            );
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut config = ScenarioConfig::default();
        config.d = 1;
        match config.validate().unwrap_err() {
            Error::InvalidConfig { field, .. } => assert_eq!(field, "d"),
            other => panic!("unexpected error {other:?}"),
        }
        let mut config = ScenarioConfig::default();
        config.bag_size_min = 0;
        assert!(config.validate().is_err());
        let mut config = ScenarioConfig::default();
        config.bag_size_max = 0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn probe_set_sizes_and_determinism() {
        let config = ScenarioConfig::default();
        let p = probe_set(&config, 9).unwrap();
        assert_eq!(p.len(), 2 * PROBE_PER_SIDE);
        let n_id = p.iter().filter(|i| i.origin.is_id()).count();
        assert_eq!(n_id, PROBE_PER_SIDE);
        assert_eq!(p, probe_set(&config, 9).unwrap());
    }
}
