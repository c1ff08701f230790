//! Flat `key=value` run configuration: one assignment per line, `#` starts a
//! comment, unknown keys are errors, and command-line `--set` overrides win.
//! Every field of the scenario and training configs is reachable; absent
//! keys take the documented defaults.

use std::path::Path;

use ossd_core::{DeltaOod, FeatureSource, ScenarioConfig, ScoreKind, SelfTrainConfig};

use crate::error::{CliError, Result};

/// The resolved pair of configs a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub scenario: ScenarioConfig,
    pub train: SelfTrainConfig,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            scenario: ScenarioConfig::default(),
            train: SelfTrainConfig::default(),
        }
    }
}

pub const KNOWN_KEYS: &[&str] = &[
    // scenario
    "d",
    "k",
    "m",
    "mean_radius",
    "class_spread",
    "background_box",
    "n_labeled_bags",
    "n_unlabeled_pure_id",
    "n_unlabeled_mixed",
    "n_unlabeled_pure_ood",
    "bag_size_min",
    "bag_size_max",
    "n_test_per_class",
    // training
    "lambda_unsup",
    "tau_conf",
    "delta_ood",
    "alpha",
    "lambda_ood",
    "eta",
    "momentum",
    "iters_supervised",
    "iters_ood",
    "iters_ssod",
    "batch_labeled",
    "batch_unlabeled",
    "checkpoint_every",
    "sigma_aug",
    "score_kind",
    "energy_temperature",
    "feature_source",
    "shrinkage",
    "hidden_width",
    "init_scale",
    "seed",
];

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("key '{key}': expected a count, got '{value}'")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("key '{key}': expected a number, got '{value}'")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("key '{key}': expected a seed, got '{value}'")))
}

pub fn parse_score_kind(value: &str, energy_temperature: f64) -> Result<ScoreKind> {
    match value.to_ascii_lowercase().as_str() {
        "msp" => Ok(ScoreKind::Msp),
        "iac" => Ok(ScoreKind::Iac),
        "energy" => Ok(ScoreKind::Energy {
            temperature: energy_temperature,
        }),
        "entropy" => Ok(ScoreKind::Entropy),
        "mahalanobis" => Ok(ScoreKind::Mahalanobis),
        "euclidean" => Ok(ScoreKind::Euclidean),
        other => Err(CliError::Config(format!(
            "key 'score_kind': unknown kind '{other}' (expected msp, iac, \
             energy, entropy, mahalanobis, or euclidean)"
        ))),
    }
}

impl RunSpec {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.scenario;
        let t = &mut self.train;
        match key {
            "d" => s.d = parse_usize(key, value)?,
            "k" => s.num_id_classes = parse_usize(key, value)?,
            "m" => s.num_ood_clusters = parse_usize(key, value)?,
            "mean_radius" => s.mean_radius = parse_f64(key, value)?,
            "class_spread" => s.class_spread = parse_f64(key, value)?,
            "background_box" => s.background_box = parse_f64(key, value)?,
            "n_labeled_bags" => s.n_labeled_bags = parse_usize(key, value)?,
            "n_unlabeled_pure_id" => s.n_unlabeled_pure_id = parse_usize(key, value)?,
            "n_unlabeled_mixed" => s.n_unlabeled_mixed = parse_usize(key, value)?,
            "n_unlabeled_pure_ood" => s.n_unlabeled_pure_ood = parse_usize(key, value)?,
            "bag_size_min" => s.bag_size_min = parse_usize(key, value)?,
            "bag_size_max" => s.bag_size_max = parse_usize(key, value)?,
            "n_test_per_class" => s.n_test_per_class = parse_usize(key, value)?,
            "lambda_unsup" => t.lambda_unsup = parse_f64(key, value)?,
            "tau_conf" => t.tau_conf = parse_f64(key, value)?,
            "delta_ood" => {
                t.delta_ood = if value == "auto-TNR95" {
                    DeltaOod::AutoTnr95
                } else {
                    DeltaOod::Fixed(parse_f64(key, value)?)
                }
            }
            "alpha" => t.alpha = parse_f64(key, value)?,
            "lambda_ood" => t.lambda_ood = parse_f64(key, value)?,
            "eta" => t.eta = parse_f64(key, value)?,
            "momentum" => t.momentum = parse_f64(key, value)?,
            "iters_supervised" => t.iters_supervised = parse_usize(key, value)?,
            "iters_ood" => t.iters_ood = parse_usize(key, value)?,
            "iters_ssod" => t.iters_ssod = parse_usize(key, value)?,
            "batch_labeled" => t.batch_labeled = parse_usize(key, value)?,
            "batch_unlabeled" => t.batch_unlabeled = parse_usize(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse_usize(key, value)?,
            "sigma_aug" => t.sigma_aug = parse_f64(key, value)?,
            "score_kind" => {
                let temperature = match t.score_kind {
                    ScoreKind::Energy { temperature } => temperature,
                    _ => 1.0,
                };
                t.score_kind = parse_score_kind(value, temperature)?;
            }
            "energy_temperature" => {
                // Only meaningful combined with score_kind=energy;
                // load_run_spec pre-applies it so file order does not matter.
                let temperature = parse_f64(key, value)?;
                if let ScoreKind::Energy { .. } = t.score_kind {
                    t.score_kind = ScoreKind::Energy { temperature };
                }
            }
            "feature_source" => {
                t.feature_source = match value.to_ascii_lowercase().as_str() {
                    "hidden" => FeatureSource::Hidden,
                    "raw" => FeatureSource::Raw,
                    other => {
                        return Err(CliError::Config(format!(
                            "key 'feature_source': expected hidden or raw, got '{other}'"
                        )))
                    }
                }
            }
            "shrinkage" => t.shrinkage = parse_f64(key, value)?,
            "hidden_width" => t.hidden_width = parse_usize(key, value)?,
            "init_scale" => t.init_scale = parse_f64(key, value)?,
            "seed" => t.seed = parse_u64(key, value)?,
            unknown => {
                return Err(CliError::Config(format!(
                    "unknown config key '{unknown}'"
                )))
            }
        }
        Ok(())
    }
}

/// Parses a config file, then applies `overrides` (later assignments win).
pub fn load_run_spec(path: Option<&Path>, overrides: &[String]) -> Result<RunSpec> {
    // Two passes keyed on ordering: energy_temperature must combine with
    // score_kind=energy regardless of their relative order.
    let mut assignments: Vec<(String, String)> = Vec::new();
    if let Some(path) = path {
        let content = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        for (idx, raw) in content.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{}: line {}: expected key=value, got '{raw}'",
                    path.display(),
                    idx + 1
                ))
            })?;
            assignments.push((key.trim().to_string(), value.trim().to_string()));
        }
    }
    for item in overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects key=value, got '{item}'"))
        })?;
        assignments.push((key.trim().to_string(), value.trim().to_string()));
    }

    let mut spec = RunSpec::default();
    // Apply energy_temperature first so a later score_kind=energy sees it,
    // then everything else in order.
    let mut temperature = None;
    for (key, value) in &assignments {
        if key == "energy_temperature" {
            temperature = Some(parse_f64(key, value)?);
        }
    }
    for (key, value) in &assignments {
        if key == "energy_temperature" {
            continue;
        }
        spec.set(key, value)?;
    }
    if let Some(temperature) = temperature {
        if let ScoreKind::Energy { .. } = spec.train.score_kind {
            spec.train.score_kind = ScoreKind::Energy { temperature };
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_match_library_defaults() {
        let spec = load_run_spec(None, &[]).unwrap();
        assert_eq!(spec, RunSpec::default());
    }

    #[test]
    fn file_values_comments_and_overrides() {
        let f = write_temp(
            "# scenario\nk = 4\nmean_radius = 6.5  # wider\nseed = 9\n\ntau_conf = 0.7\n",
        );
        let spec = load_run_spec(Some(f.path()), &["seed=11".into()]).unwrap();
        assert_eq!(spec.scenario.num_id_classes, 4);
        assert_eq!(spec.scenario.mean_radius, 6.5);
        assert_eq!(spec.train.tau_conf, 0.7);
        assert_eq!(spec.train.seed, 11);
    }

    #[test]
    fn unknown_key_is_an_error_naming_the_key() {
        let f = write_temp("bogus_key=1\n");
        let err = load_run_spec(Some(f.path()), &[]).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn every_documented_key_is_settable() {
        let mut spec = RunSpec::default();
        for key in KNOWN_KEYS {
            let value = match *key {
                "score_kind" => "energy",
                "feature_source" => "raw",
                "delta_ood" => "auto-TNR95",
                _ => "3",
            };
            spec.set(key, value)
                .unwrap_or_else(|e| panic!("key {key}: {e}"));
        }
    }

    #[test]
    fn delta_ood_forms() {
        let mut spec = RunSpec::default();
        spec.set("delta_ood", "0.5").unwrap();
        assert_eq!(spec.train.delta_ood, DeltaOod::Fixed(0.5));
        spec.set("delta_ood", "-inf").unwrap();
        assert_eq!(spec.train.delta_ood, DeltaOod::Fixed(f64::NEG_INFINITY));
        spec.set("delta_ood", "auto-TNR95").unwrap();
        assert_eq!(spec.train.delta_ood, DeltaOod::AutoTnr95);
    }

    #[test]
    fn energy_temperature_combines_in_any_order() {
        let f = write_temp("energy_temperature=2.5\nscore_kind=energy\n");
        let spec = load_run_spec(Some(f.path()), &[]).unwrap();
        assert_eq!(spec.train.score_kind, ScoreKind::Energy { temperature: 2.5 });

        let f = write_temp("score_kind=energy\nenergy_temperature=2.5\n");
        let spec = load_run_spec(Some(f.path()), &[]).unwrap();
        assert_eq!(spec.train.score_kind, ScoreKind::Energy { temperature: 2.5 });
    }
}
