//! ID-ness scoring: class statistics, the six scoring functions, threshold
//! calibration, and the pseudo-label filter.
//!
//! Every score follows one orientation: higher means more in-distribution.
//! Samples scoring below the threshold are treated as OOD and filtered out.

use crate::error::{Error, Result};
use crate::linalg::{euclidean_distance, Matrix};
use crate::linclf::{self, ClassifierParams};

/// Which scoring function to apply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreKind {
    /// Maximum softmax probability over the K detector classes.
    Msp,
    /// Inverse abstaining confidence, 1 − p(abstention), on a K+1 network.
    Iac,
    /// Temperature-scaled log-sum-exp of the K foreground logits.
    Energy { temperature: f64 },
    /// Negative Shannon entropy over all C outputs.
    Entropy,
    /// Max over classes of the negative Mahalanobis distance to class means.
    Mahalanobis,
    /// Negative distance to the nearest class mean.
    Euclidean,
}

impl ScoreKind {
    pub fn needs_stats(&self) -> bool {
        matches!(self, ScoreKind::Mahalanobis | ScoreKind::Euclidean)
    }

    /// Bounded scores live in [0, 1] and share the fixed 0.5 threshold
    /// default; unbounded scores get a calibrated threshold.
    pub fn is_bounded(&self) -> bool {
        matches!(self, ScoreKind::Msp | ScoreKind::Iac)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoreKind::Msp => "msp",
            ScoreKind::Iac => "iac",
            ScoreKind::Energy { .. } => "energy",
            ScoreKind::Entropy => "entropy",
            ScoreKind::Mahalanobis => "mahalanobis",
            ScoreKind::Euclidean => "euclidean",
        }
    }
}

/// Which feature vector distance scores consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureSource {
    /// Hidden activations of the scoring network (default).
    #[default]
    Hidden,
    /// The raw input features.
    Raw,
}

/// Per-class means plus a shrinkage-regularized pooled covariance and its
/// cached inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    means: Vec<Vec<f64>>,
    pooled_cov: Matrix,
    shrinkage: f64,
    precision: Matrix,
}

impl ClassStats {
    /// Validates shapes and symmetry, then caches the inverse. Fails with
    /// `SingularCovariance` when the matrix is not positive definite.
    pub fn new(means: Vec<Vec<f64>>, pooled_cov: Matrix, shrinkage: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::EmptyInput("class means"));
        }
        let p = means[0].len();
        for m in &means {
            if m.len() != p {
                return Err(Error::DimensionMismatch {
                    context: "class mean",
                    expected: p,
                    actual: m.len(),
                });
            }
        }
        if pooled_cov.rows() != p || pooled_cov.cols() != p {
            return Err(Error::DimensionMismatch {
                context: "pooled covariance",
                expected: p,
                actual: pooled_cov.rows(),
            });
        }
        if !pooled_cov.is_symmetric(1e-9) {
            return Err(Error::SingularCovariance);
        }
        let precision = pooled_cov.spd_inverse()?;
        Ok(ClassStats {
            means,
            pooled_cov,
            shrinkage,
            precision,
        })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn pooled_cov(&self) -> &Matrix {
        &self.pooled_cov
    }

    pub fn precision(&self) -> &Matrix {
        &self.precision
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }
}

/// Per-class sample means and the pooled within-class covariance
/// S = scatter / (N − K), shrunk as Σ = (1−ε)·S + ε·(trace(S)/p)·I.
pub fn fit_class_stats(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    epsilon: f64,
) -> Result<ClassStats> {
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch {
            context: "features vs labels",
            left: features.len(),
            right: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(Error::EmptyInput("class statistics sample"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidConfig {
            field: "shrinkage",
            message: format!("must be in [0, 1], got {epsilon}"),
        });
    }
    let p = features[0].len();
    let n = features.len();
    if n <= num_classes {
        return Err(Error::EmptyInput("fewer samples than classes plus one"));
    }

    let mut counts = vec![0usize; num_classes];
    let mut means = vec![vec![0.0; p]; num_classes];
    for (x, &label) in features.iter().zip(labels) {
        if label >= num_classes {
            return Err(Error::TargetOutOfRange {
                target: label,
                num_classes,
            });
        }
        if x.len() != p {
            return Err(Error::DimensionMismatch {
                context: "feature vector",
                expected: p,
                actual: x.len(),
            });
        }
        counts[label] += 1;
        for (m, v) in means[label].iter_mut().zip(x) {
            *m += v;
        }
    }
    for (k, count) in counts.iter().enumerate() {
        if *count == 0 {
            return Err(Error::ClassWithoutSamples(k));
        }
        for m in means[k].iter_mut() {
            *m /= *count as f64;
        }
    }

    let mut scatter = Matrix::zeros(p, p);
    let mut centered = vec![0.0; p];
    for (x, &label) in features.iter().zip(labels) {
        for ((c, v), m) in centered.iter_mut().zip(x).zip(&means[label]) {
            *c = v - m;
        }
        scatter.add_outer(&centered, &centered, 1.0);
    }
    let denom = (n - num_classes) as f64;
    let mut pooled = scatter;
    for v in pooled.data_mut() {
        *v /= denom;
    }

    let ridge = epsilon * pooled.trace() / p as f64;
    for v in pooled.data_mut() {
        *v *= 1.0 - epsilon;
    }
    for i in 0..p {
        pooled[(i, i)] += ridge;
    }
    ClassStats::new(means, pooled, epsilon)
}

fn check_normalized(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

/// γ = max_k p_k over the K detector-class probabilities.
pub fn msp_score(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("probabilities"));
    }
    check_normalized(probs)?;
    Ok(probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// γ = 1 − p_{K+1}, the inverse abstaining confidence of a K+1 classifier.
pub fn iac_score(probs: &[f64], num_id_classes: usize) -> Result<f64> {
    if probs.len() != num_id_classes + 1 {
        return Err(Error::DimensionMismatch {
            context: "iac probabilities",
            expected: num_id_classes + 1,
            actual: probs.len(),
        });
    }
    Ok(1.0 - probs[num_id_classes])
}

/// γ = T · log Σ exp(f_i / T) over the foreground logits, computed stably.
pub fn energy_score(foreground_logits: &[f64], temperature: f64) -> Result<f64> {
    if foreground_logits.is_empty() {
        return Err(Error::EmptyInput("energy logits"));
    }
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let max = foreground_logits
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = foreground_logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .sum();
    Ok(max + temperature * sum.ln())
}

/// γ = Σ p_i log p_i (negative Shannon entropy), with 0·log 0 = 0.
pub fn entropy_score(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("probabilities"));
    }
    check_normalized(probs)?;
    Ok(probs
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum())
}

/// γ = max_k −(f − μ_k)ᵀ Σ⁻¹ (f − μ_k). Always ≤ 0.
pub fn mahalanobis_score(f: &[f64], stats: &ClassStats) -> Result<f64> {
    if f.len() != stats.dim() {
        return Err(Error::DimensionMismatch {
            context: "mahalanobis feature",
            expected: stats.dim(),
            actual: f.len(),
        });
    }
    let mut best = f64::NEG_INFINITY;
    let mut diff = vec![0.0; f.len()];
    for mean in stats.means() {
        for ((d, a), b) in diff.iter_mut().zip(f).zip(mean) {
            *d = a - b;
        }
        let score = -stats.precision().quadratic_form(&diff);
        if score > best {
            best = score;
        }
    }
    Ok(best)
}

/// γ = −min_k ‖f − μ_k‖₂. Always ≤ 0.
pub fn euclidean_score(f: &[f64], stats: &ClassStats) -> Result<f64> {
    if f.len() != stats.dim() {
        return Err(Error::DimensionMismatch {
            context: "euclidean feature",
            expected: stats.dim(),
            actual: f.len(),
        });
    }
    let min = stats
        .means()
        .iter()
        .map(|m| euclidean_distance(f, m))
        .fold(f64::INFINITY, f64::min);
    Ok(-min)
}

/// Scores one feature vector with the given network. `num_id_classes` is K;
/// the network has either K or K+1 outputs.
pub fn score_instance(
    kind: ScoreKind,
    features: &[f64],
    net: &ClassifierParams,
    num_id_classes: usize,
    stats: Option<&ClassStats>,
    feature_source: FeatureSource,
) -> Result<f64> {
    let c = net.num_outputs();
    if c < num_id_classes {
        return Err(Error::DimensionMismatch {
            context: "network outputs vs id classes",
            expected: num_id_classes,
            actual: c,
        });
    }
    match kind {
        ScoreKind::Msp => {
            let logits = linclf::forward(net, features)?;
            let probs = linclf::softmax(&logits[..num_id_classes], 1.0)?;
            msp_score(&probs)
        }
        ScoreKind::Iac => {
            if c != num_id_classes + 1 {
                return Err(Error::DimensionMismatch {
                    context: "iac network outputs",
                    expected: num_id_classes + 1,
                    actual: c,
                });
            }
            let logits = linclf::forward(net, features)?;
            let probs = linclf::softmax(&logits, 1.0)?;
            iac_score(&probs, num_id_classes)
        }
        ScoreKind::Energy { temperature } => {
            let logits = linclf::forward(net, features)?;
            energy_score(&logits[..num_id_classes], temperature)
        }
        ScoreKind::Entropy => {
            let logits = linclf::forward(net, features)?;
            let probs = linclf::softmax(&logits, 1.0)?;
            entropy_score(&probs)
        }
        ScoreKind::Mahalanobis | ScoreKind::Euclidean => {
            let stats = stats.ok_or(Error::MissingStats(kind.name()))?;
            let hidden;
            let f: &[f64] = match feature_source {
                FeatureSource::Raw => features,
                FeatureSource::Hidden => {
                    hidden = linclf::forward_hidden(net, features)?.1;
                    &hidden
                }
            };
            if kind == ScoreKind::Mahalanobis {
                mahalanobis_score(f, stats)
            } else {
                euclidean_score(f, stats)
            }
        }
    }
}

/// Elementwise dispatch of `score_instance` over a batch of feature vectors.
pub fn score_batch(
    kind: ScoreKind,
    features: &[Vec<f64>],
    net: &ClassifierParams,
    num_id_classes: usize,
    stats: Option<&ClassStats>,
    feature_source: FeatureSource,
) -> Result<Vec<f64>> {
    if kind.needs_stats() && stats.is_none() {
        return Err(Error::MissingStats(kind.name()));
    }
    features
        .iter()
        .map(|f| score_instance(kind, f, net, num_id_classes, stats, feature_source))
        .collect()
}

/// Largest observed score `t` such that the fraction of `id_scores` at or
/// above `t` is at least `target_tnr`. Thresholds are attained at observed
/// values only; no interpolation.
pub fn calibrate_threshold(id_scores: &[f64], target_tnr: f64) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::EmptyInput("id scores"));
    }
    if !(target_tnr > 0.0 && target_tnr <= 1.0) {
        return Err(Error::InvalidConfig {
            field: "target_tnr",
            message: format!("must be in (0, 1], got {target_tnr}"),
        });
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut best = sorted[0];
    let mut i = 0;
    while i < n {
        let value = sorted[i];
        // `i` is the first occurrence of `value`, so n - i scores are >= it.
        let fraction = (n - i) as f64 / n as f64;
        if fraction >= target_tnr {
            best = value;
        } else {
            break;
        }
        let mut j = i + 1;
        while j < n && sorted[j] == value {
            j += 1;
        }
        i = j;
    }
    Ok(best)
}

/// A thresholded pseudo-label for one unlabeled instance. `idness` is the
/// ID-ness score attached by the OOD filter.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub instance_ref: usize,
    pub klass: usize,
    pub confidence: f64,
    pub idness: Option<f64>,
}

/// Keeps exactly the pseudo-labels whose score is at or above `delta_ood`,
/// attaching the score; order is preserved.
pub fn ood_filter(
    pseudo: &[PseudoLabel],
    scores: &[f64],
    delta_ood: f64,
) -> Result<Vec<PseudoLabel>> {
    if pseudo.len() != scores.len() {
        return Err(Error::LengthMismatch {
            context: "pseudo-labels vs scores",
            left: pseudo.len(),
            right: scores.len(),
        });
    }
    Ok(pseudo
        .iter()
        .zip(scores)
        .filter(|(_, &s)| s >= delta_ood)
        .map(|(p, &s)| PseudoLabel {
            idness: Some(s),
            ..p.clone()
        })
        .collect())
}
