//! Deterministic desk-scale simulator for open-set semi-supervised
//! self-training.
//!
//! Labeled data covers K in-distribution classes; the unlabeled pool also
//! contains instances from unknown OOD clusters. A teacher-student pair
//! trains on confidence-thresholded pseudo-labels, which lets confident
//! OOD mispredictions feed back into training and inflate the pseudo-label
//! false-positive rate over time. The crate provides:
//!
//! * [`synthdata`] — synthetic scenario generation (pure-ID / mixed /
//!   pure-OOD bags, background samples, probe sets), bit-reproducible from
//!   a seed.
//! * [`linclf`] — a one-hidden-layer softmax classifier with hand-derived
//!   gradients, SGD, and EMA teacher updates.
//! * [`oodscore`] — class statistics and six ID-ness scores (MSP, IAC,
//!   energy, entropy, Mahalanobis, Euclidean), threshold calibration, and
//!   the pseudo-label filter.
//! * [`metrics`] — AUROC, FPR@TNRx, pseudo-label quality counts, and a
//!   test-accuracy proxy.
//! * [`selftrain`] — the baseline, offline-filtered, and online-head
//!   pipelines with checkpoint telemetry.
//!
//! All scores share one orientation: higher means more in-distribution.
//! Everything is `f64` and deterministic given (config, seed).

pub mod error;
pub mod linalg;
pub mod linclf;
pub mod metrics;
pub mod oodscore;
mod rng;
pub mod selftrain;
pub mod synthdata;

pub use error::{Error, Result};
pub use linclf::{
    ce_loss_and_grad, ema_update, forward, forward_hidden, init_params, predict, sgd_step,
    softmax, ClassifierParams, TeacherStudent,
};
pub use metrics::{auroc, fpr_at_tnr, pseudo_stats, test_accuracy, PseudoStats};
pub use oodscore::{
    calibrate_threshold, energy_score, entropy_score, euclidean_score, fit_class_stats,
    iac_score, mahalanobis_score, msp_score, ood_filter, score_batch, score_instance,
    ClassStats, FeatureSource, PseudoLabel, ScoreKind,
};
pub use selftrain::{
    probe_ood_auroc, pseudo_label, run_pipeline, ssod_step, train_offline_ood,
    train_supervised, CheckpointRecord, DeltaOod, Mode, OodFilterContext, SelfTrainConfig,
    SsodState, Telemetry,
};
pub use synthdata::{
    bag_kind, generate_scenario, probe_set, sample_background, sample_cluster_means, Bag,
    BagKind, Instance, Origin, Scenario, ScenarioConfig, PROBE_PER_SIDE,
};
