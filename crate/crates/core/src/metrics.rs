//! OOD-detection metrics (AUROC, FPR@TNRx), pseudo-label quality statistics,
//! and the classification-accuracy proxy for detector quality.

use crate::error::{Error, Result};
use crate::linclf::{predict, ClassifierParams};
use crate::oodscore::{calibrate_threshold, PseudoLabel};
use crate::synthdata::{Instance, Origin};

/// Probability that a random ID score exceeds a random OOD score, ties
/// counted one half. Computed from rank statistics; the numerator is kept in
/// integers (doubled ranks) so monotone transforms of the scores leave the
/// result bit-identical.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::EmptyInput("id scores"));
    }
    if ood_scores.is_empty() {
        return Err(Error::EmptyInput("ood scores"));
    }
    let n_id = id_scores.len();
    let n_ood = ood_scores.len();
    let mut combined: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    combined.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of ID ranks with average ranks over tie groups, doubled to stay
    // integral: a group occupying ranks l..=r contributes (l + r) per member.
    let mut doubled_id_rank_sum: u128 = 0;
    let mut i = 0;
    while i < combined.len() {
        let mut j = i;
        while j < combined.len() && combined[j].0 == combined[i].0 {
            j += 1;
        }
        let doubled_avg_rank = (i + 1 + j) as u128; // (l + r) with 1-based ranks
        for item in &combined[i..j] {
            if item.1 {
                doubled_id_rank_sum += doubled_avg_rank;
            }
        }
        i = j;
    }
    // 2U = 2R_id − n_id(n_id + 1)
    let doubled_u = doubled_id_rank_sum - (n_id as u128) * (n_id as u128 + 1);
    Ok(doubled_u as f64 / (2.0 * n_id as f64 * n_ood as f64))
}

/// Fraction of OOD scores retained as ID at the threshold that keeps at
/// least fraction `x` of the ID scores.
pub fn fpr_at_tnr(id_scores: &[f64], ood_scores: &[f64], x: f64) -> Result<f64> {
    if ood_scores.is_empty() {
        return Err(Error::EmptyInput("ood scores"));
    }
    let t = calibrate_threshold(id_scores, x)?;
    let fp = ood_scores.iter().filter(|s| **s >= t).count();
    Ok(fp as f64 / ood_scores.len() as f64)
}

/// Quality counts for a pseudo-label set against ground-truth origins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoStats {
    pub n_pseudo_id: usize,
    pub n_pseudo_ood: usize,
    /// n_pseudo_ood / (n_pseudo_id + n_pseudo_ood), 0/0 defined as 0.
    pub fp_rate: f64,
    /// n_pseudo_id / n_id_available, 0/0 defined as 0.
    pub id_recall: f64,
}

/// Counts pseudo-labels by the origin of the instance they reference.
/// OodClass and Background origins both count as false positives.
pub fn pseudo_stats(
    pseudo: &[PseudoLabel],
    origins: &[Origin],
    n_id_available: usize,
) -> Result<PseudoStats> {
    let mut n_id = 0usize;
    let mut n_ood = 0usize;
    for p in pseudo {
        let origin = origins.get(p.instance_ref).ok_or(Error::DanglingInstanceRef {
            index: p.instance_ref,
            pool_size: origins.len(),
        })?;
        if origin.is_id() {
            n_id += 1;
        } else {
            n_ood += 1;
        }
    }
    let total = n_id + n_ood;
    let fp_rate = if total == 0 {
        0.0
    } else {
        n_ood as f64 / total as f64
    };
    let id_recall = if n_id_available == 0 {
        0.0
    } else {
        n_id as f64 / n_id_available as f64
    };
    Ok(PseudoStats {
        n_pseudo_id: n_id,
        n_pseudo_ood: n_ood,
        fp_rate,
        id_recall,
    })
}

/// Fraction of test instances whose predicted class matches their origin
/// class. Every test instance must be in-distribution.
pub fn test_accuracy(params: &ClassifierParams, test: &[Instance], k: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyInput("test set"));
    }
    let mut correct = 0usize;
    for inst in test {
        let truth = match inst.origin {
            Origin::IdClass(c) => c,
            _ => return Err(Error::ModeStateMismatch("OOD instance in test set")),
        };
        let (class, _) = predict(params, &inst.features, k)?;
        if class == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linclf::ClassifierParams;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force pairwise AUROC oracle, ties counted one half.
    fn auroc_pairwise(id: &[f64], ood: &[f64]) -> f64 {
        let mut score = 0.0;
        for a in id {
            for b in ood {
                if a > b {
                    score += 1.0;
                } else if a == b {
                    score += 0.5;
                }
            }
        }
        score / (id.len() * ood.len()) as f64
    }

    #[test]
    fn auroc_hand_values() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5], &[0.5]).unwrap(), 0.5);
        // 3 of 4 pairs ordered correctly.
        assert_eq!(auroc(&[0.8, 0.4], &[0.6, 0.2]).unwrap(), 0.75);
        assert!(auroc(&[], &[0.1]).is_err());
        assert!(auroc(&[0.1], &[]).is_err());
    }

    #[test]
    fn auroc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let n_id = rng.gen_range(1..60);
            let n_ood = rng.gen_range(1..60);
            // Coarse grid to force plenty of ties.
            let id: Vec<f64> = (0..n_id)
                .map(|_| (rng.gen_range(-10..10) as f64) / 4.0)
                .collect();
            let ood: Vec<f64> = (0..n_ood)
                .map(|_| (rng.gen_range(-10..10) as f64) / 4.0)
                .collect();
            let fast = auroc(&id, &ood).unwrap();
            let slow = auroc_pairwise(&id, &ood);
            assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auroc_monotone_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let id: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let ood: Vec<f64> = (0..30).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let base = auroc(&id, &ood).unwrap();
        let transforms: [fn(f64) -> f64; 3] =
            [|x| 2.0 * x + 7.0, |x| x.atan(), |x| x.exp()];
        for t in transforms {
            let tid: Vec<f64> = id.iter().map(|&x| t(x)).collect();
            let tood: Vec<f64> = ood.iter().map(|&x| t(x)).collect();
            assert_eq!(auroc(&tid, &tood).unwrap(), base);
        }
    }

    #[test]
    fn auroc_complement_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let id: Vec<f64> = (0..rng.gen_range(1..30))
                .map(|_| (rng.gen_range(-6..6) as f64) / 2.0)
                .collect();
            let ood: Vec<f64> = (0..rng.gen_range(1..30))
                .map(|_| (rng.gen_range(-6..6) as f64) / 2.0)
                .collect();
            let sum = auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fpr_at_tnr_hand_values() {
        let id: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(fpr_at_tnr(&id, &[0.0], 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tnr(&id, &[0.0], 0.5).unwrap(), 0.0);

        // Threshold lands on 0.7 (the largest value keeping >= 75% of ID).
        let id = [0.9, 0.8, 0.7, 0.6];
        let ood = [0.75, 0.1];
        assert_eq!(fpr_at_tnr(&id, &ood, 0.75).unwrap(), 0.5);

        // Indistinguishable populations.
        let same: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(fpr_at_tnr(&same, &same, 0.95).unwrap() >= 0.95);
    }

    #[test]
    fn fpr_monotone_in_tnr() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..100 {
            let id: Vec<f64> = (0..rng.gen_range(1..50))
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            let ood: Vec<f64> = (0..rng.gen_range(1..50))
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            let f50 = fpr_at_tnr(&id, &ood, 0.50).unwrap();
            let f75 = fpr_at_tnr(&id, &ood, 0.75).unwrap();
            let f95 = fpr_at_tnr(&id, &ood, 0.95).unwrap();
            assert!(f95 >= f75 && f75 >= f50, "{f50} {f75} {f95}");
        }
    }

    fn mk_pseudo(refs: &[usize]) -> Vec<PseudoLabel> {
        refs.iter()
            .map(|&i| PseudoLabel {
                instance_ref: i,
                klass: 0,
                confidence: 0.9,
                idness: None,
            })
            .collect()
    }

    #[test]
    fn pseudo_stats_counting() {
        let origins = vec![
            Origin::IdClass(0),
            Origin::OodClass(0),
            Origin::IdClass(1),
        ];
        let stats = pseudo_stats(&mk_pseudo(&[0, 1, 2]), &origins, 2).unwrap();
        assert_eq!(stats.n_pseudo_id, 2);
        assert_eq!(stats.n_pseudo_ood, 1);
        assert!((stats.fp_rate - 1.0 / 3.0).abs() < 1e-15);

        let empty = pseudo_stats(&[], &origins, 0).unwrap();
        assert_eq!(empty.fp_rate, 0.0);
        assert_eq!(empty.id_recall, 0.0);
    }

    #[test]
    fn pseudo_stats_recall_and_fp() {
        // 7 ID + 3 OOD pseudo-labels, 14 ID available.
        let mut origins = vec![Origin::IdClass(0); 7];
        origins.extend(vec![Origin::OodClass(0); 2]);
        origins.push(Origin::Background);
        let refs: Vec<usize> = (0..10).collect();
        let stats = pseudo_stats(&mk_pseudo(&refs), &origins, 14).unwrap();
        assert_eq!(stats.n_pseudo_id, 7);
        assert_eq!(stats.n_pseudo_ood, 3);
        assert!((stats.fp_rate - 0.3).abs() < 1e-15);
        assert!((stats.id_recall - 0.5).abs() < 1e-15);
        // Arithmetic identity is re-derivable from the counts.
        let rederived =
            stats.n_pseudo_ood as f64 / (stats.n_pseudo_id + stats.n_pseudo_ood) as f64;
        assert_eq!(stats.fp_rate, rederived);
    }

    #[test]
    fn pseudo_stats_dangling_ref() {
        let origins = vec![Origin::IdClass(0)];
        assert!(matches!(
            pseudo_stats(&mk_pseudo(&[3]), &origins, 1),
            Err(Error::DanglingInstanceRef { .. })
        ));
    }

    #[test]
    fn accuracy_of_constant_classifier() {
        // All-zero parameters predict class 0 everywhere (tie-break).
        let params = ClassifierParams::zeros(2, 3, 4);
        let test: Vec<Instance> = (0..4)
            .flat_map(|k| {
                (0..5).map(move |_| Instance {
                    features: vec![k as f64, 1.0],
                    origin: Origin::IdClass(k),
                })
            })
            .collect();
        assert_eq!(test_accuracy(&params, &test, 4).unwrap(), 0.25);
    }

    #[test]
    fn accuracy_rejects_ood_in_test() {
        let params = ClassifierParams::zeros(2, 3, 2);
        let test = vec![Instance {
            features: vec![0.0, 0.0],
            origin: Origin::OodClass(0),
        }];
        assert!(test_accuracy(&params, &test, 2).is_err());
    }

    #[test]
    fn accuracy_matches_enumerated_predictions() {
        let params = crate::linclf::init_params(3, 5, 4, 55, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let test: Vec<Instance> = (0..20)
            .map(|i| Instance {
                features: (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                origin: Origin::IdClass(i % 4),
            })
            .collect();
        let mut correct = 0;
        for inst in &test {
            let (class, _) = predict(&params, &inst.features, 4).unwrap();
            if Origin::IdClass(class) == inst.origin {
                correct += 1;
            }
        }
        let expect = correct as f64 / 20.0;
        assert_eq!(test_accuracy(&params, &test, 4).unwrap(), expect);
    }
}
