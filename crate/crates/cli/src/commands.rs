//! Subcommand implementations. Every emitted number is formatted with the
//! shortest round-trip decimal representation, so identical invocations
//! produce byte-identical output.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use ossd_core::{
    euclidean_score, fpr_at_tnr, generate_scenario, mahalanobis_score, run_pipeline,
    score_instance, ClassStats, ClassifierParams, FeatureSource, Mode, ScoreKind, Telemetry,
};

use crate::config::{load_run_spec, parse_score_kind, RunSpec};
use crate::error::{CliError, Result};
use crate::matfile;

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:?}")
    }
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

pub struct ScoreArgs<'a> {
    pub embeddings: &'a Path,
    pub kind: &'a str,
    pub model: Option<&'a Path>,
    pub stats: Option<&'a Path>,
    pub id_classes: Option<usize>,
    pub temperature: f64,
}

/// Scores each embedding row, emitting `index,score` lines in input order.
pub fn cmd_score(args: &ScoreArgs) -> Result<String> {
    let kind = parse_score_kind(args.kind, args.temperature)?;
    let embeddings = matfile::read_embeddings(args.embeddings)?;
    let model = args.model.map(matfile::read_model).transpose()?;
    let stats = args.stats.map(matfile::read_stats).transpose()?;

    let scores: Vec<f64> = match kind {
        ScoreKind::Mahalanobis | ScoreKind::Euclidean => {
            let stats = stats.as_ref().ok_or_else(|| {
                CliError::Usage(format!("score kind '{}' requires --stats", kind.name()))
            })?;
            match &model {
                // With a model, distance scores use its hidden activations.
                Some(net) => score_rows_with_net(&embeddings, net, kind, Some(stats), args)?,
                None => score_rows_distance(&embeddings, stats, kind)?,
            }
        }
        _ => {
            let net = model.as_ref().ok_or_else(|| {
                CliError::Usage(format!("score kind '{}' requires --model", kind.name()))
            })?;
            score_rows_with_net(&embeddings, net, kind, None, args)?
        }
    };

    let mut out = String::from("index,score\n");
    for (i, s) in scores.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", fmt(*s));
    }
    Ok(out)
}

fn resolve_id_classes(
    net: &ClassifierParams,
    kind: ScoreKind,
    requested: Option<usize>,
) -> Result<usize> {
    let c = net.num_outputs();
    let k = requested.unwrap_or(match kind {
        ScoreKind::Iac => c.saturating_sub(1),
        _ => c,
    });
    if kind == ScoreKind::Iac && k + 1 != c {
        return Err(CliError::Usage(format!(
            "iac needs a model with K+1 outputs; model has {c} outputs but \
             --id-classes is {k}"
        )));
    }
    if k == 0 || k > c {
        return Err(CliError::Usage(format!(
            "--id-classes {k} is out of range for a model with {c} outputs"
        )));
    }
    Ok(k)
}

fn score_rows_with_net(
    embeddings: &matfile::EmbeddingMatrix,
    net: &ClassifierParams,
    kind: ScoreKind,
    stats: Option<&ClassStats>,
    args: &ScoreArgs,
) -> Result<Vec<f64>> {
    let k = resolve_id_classes(net, kind, args.id_classes)?;
    (0..embeddings.rows)
        .map(|i| {
            score_instance(kind, embeddings.row(i), net, k, stats, FeatureSource::Hidden)
                .map_err(CliError::from)
        })
        .collect()
}

fn score_rows_distance(
    embeddings: &matfile::EmbeddingMatrix,
    stats: &ClassStats,
    kind: ScoreKind,
) -> Result<Vec<f64>> {
    (0..embeddings.rows)
        .map(|i| {
            let row = embeddings.row(i);
            let s = match kind {
                ScoreKind::Mahalanobis => mahalanobis_score(row, stats)?,
                _ => euclidean_score(row, stats)?,
            };
            Ok(s)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Reads a score file: one score per line, or the `index,score` CSV that
/// `score` emits.
pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let what = path.display().to_string();
    let content = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = content.lines().enumerate().peekable();
    let indexed = matches!(lines.peek(), Some((_, line)) if line.trim() == "index,score");
    if indexed {
        lines.next();
    }
    let mut scores = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cell = if indexed {
            line.split(',').nth(1).ok_or_else(|| {
                CliError::DataFormat(format!("{what}: line {}: missing score column", idx + 1))
            })?
        } else {
            line
        };
        let v: f64 = cell.trim().parse().map_err(|_| {
            CliError::DataFormat(format!(
                "{what}: line {}: non-numeric score '{cell}'",
                idx + 1
            ))
        })?;
        scores.push(v);
    }
    if scores.is_empty() {
        return Err(CliError::DataFormat(format!("{what}: no scores found")));
    }
    Ok(scores)
}

/// Emits `auroc,fpr50,fpr75,fpr95` for an ID-score file and an OOD-score
/// file.
pub fn cmd_eval(id_path: &Path, ood_path: &Path) -> Result<String> {
    let id = read_scores(id_path)?;
    let ood = read_scores(ood_path)?;
    let a = ossd_core::auroc(&id, &ood)?;
    let f50 = fpr_at_tnr(&id, &ood, 0.50)?;
    let f75 = fpr_at_tnr(&id, &ood, 0.75)?;
    let f95 = fpr_at_tnr(&id, &ood, 0.95)?;
    Ok(format!(
        "auroc,fpr50,fpr75,fpr95\n{},{},{},{}\n",
        fmt(a),
        fmt(f50),
        fmt(f75),
        fmt(f95)
    ))
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub const TELEMETRY_HEADER: &str = "iter,n_pseudo_id,n_pseudo_ood,fp_rate,test_acc,ood_auroc";
pub const AGGREGATE_HEADER: &str = "mode,seed,final_fp_rate,final_test_acc,final_ood_auroc";

pub fn telemetry_csv(telemetry: &Telemetry) -> String {
    let mut out = String::from(TELEMETRY_HEADER);
    out.push('\n');
    for r in &telemetry.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration,
            r.n_pseudo_id,
            r.n_pseudo_ood,
            fmt(r.fp_rate),
            fmt(r.test_acc),
            fmt(r.ood_auroc)
        );
    }
    out
}

fn summary_row(mode: Mode, seed: u64, telemetry: &Telemetry) -> String {
    let last = telemetry
        .final_record()
        .expect("telemetry always has the iteration-0 checkpoint");
    format!(
        "{},{},{},{},{}",
        mode.name(),
        seed,
        fmt(last.fp_rate),
        fmt(last.test_acc),
        fmt(last.ood_auroc)
    )
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| CliError::io(path, e))
}

fn parse_mode(s: &str) -> Result<Mode> {
    s.parse().map_err(CliError::Usage)
}

fn run_one(spec: &RunSpec, mode: Mode, seed: u64) -> Result<Telemetry> {
    let mut train = spec.train.clone();
    train.seed = seed;
    let scenario = generate_scenario(&spec.scenario, seed)?;
    let (_, telemetry) = run_pipeline(mode, &train, &scenario)?;
    Ok(telemetry)
}

/// Runs one pipeline and writes `telemetry.csv`, `summary.csv`, and the
/// final teacher/student models into the output directory.
pub fn cmd_simulate(
    config: Option<&Path>,
    mode: &str,
    seed: Option<u64>,
    out_dir: &Path,
    sets: &[String],
) -> Result<()> {
    let mode = parse_mode(mode)?;
    let mut spec = load_run_spec(config, sets)?;
    if let Some(seed) = seed {
        spec.train.seed = seed;
    }
    let seed = spec.train.seed;
    let scenario = generate_scenario(&spec.scenario, seed)?;
    let (ts, telemetry) = run_pipeline(mode, &spec.train, &scenario)?;

    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    write_file(&out_dir.join("telemetry.csv"), &telemetry_csv(&telemetry))?;
    write_file(
        &out_dir.join("summary.csv"),
        &format!("{AGGREGATE_HEADER}\n{}\n", summary_row(mode, seed, &telemetry)),
    )?;
    matfile::write_model(&out_dir.join("teacher.ossd"), &ts.teacher)?;
    matfile::write_model(&out_dir.join("student.ossd"), &ts.student)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// Runs every (mode, seed) pair, writing one telemetry file per run plus a
/// row-sorted aggregate. A failing run is recorded with `nan` fields and
/// does not abort its siblings.
pub fn cmd_sweep(
    config: Option<&Path>,
    modes: &str,
    seeds: &str,
    out_dir: &Path,
    serial: bool,
    sets: &[String],
) -> Result<()> {
    let modes: Vec<Mode> = modes
        .split(',')
        .filter(|s| !s.is_empty())
        .map(parse_mode)
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad seed '{s}'")))
        })
        .collect::<Result<_>>()?;
    if modes.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage(
            "sweep needs at least one mode and one seed".into(),
        ));
    }
    let spec = load_run_spec(config, sets)?;

    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let runs: Vec<(Mode, u64)> = modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();

    let execute = |&(mode, seed): &(Mode, u64)| -> (Mode, u64, Result<Telemetry>) {
        (mode, seed, run_one(&spec, mode, seed))
    };
    let mut results: Vec<(Mode, u64, Result<Telemetry>)> = if serial {
        runs.iter().map(execute).collect()
    } else {
        runs.par_iter().map(execute).collect()
    };
    results.sort_by(|a, b| (a.0.name(), a.1).cmp(&(b.0.name(), b.1)));

    let mut aggregate = String::from(AGGREGATE_HEADER);
    aggregate.push('\n');
    let mut first_failure: Option<CliError> = None;
    for (mode, seed, outcome) in results {
        match outcome {
            Ok(telemetry) => {
                let name = format!("telemetry_{}_{seed}.csv", mode.name());
                write_file(&out_dir.join(name), &telemetry_csv(&telemetry))?;
                let _ = writeln!(aggregate, "{}", summary_row(mode, seed, &telemetry));
            }
            Err(e) => {
                eprintln!("run {} seed {seed} failed: {e}", mode.name());
                let _ = writeln!(aggregate, "{},{seed},nan,nan,nan", mode.name());
                if first_failure.is_none() {
                    first_failure = Some(e);
                }
            }
        }
    }
    write_file(&out_dir.join("aggregate.csv"), &aggregate)?;
    match first_failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
