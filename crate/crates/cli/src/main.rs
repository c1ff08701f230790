//! `ossd` — deterministic open-set self-training simulator.
//!
//! Subcommands: `score` (ID-ness scores for an embeddings file), `eval`
//! (AUROC and FPR@TNR metrics from score files), `simulate` (one pipeline
//! run with telemetry), and `sweep` (a mode x seed grid with an aggregate).
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data-format error,
//! 4 numerical failure.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use ossd_cli::commands::{cmd_eval, cmd_score, cmd_simulate, cmd_sweep, ScoreArgs};

#[derive(Parser)]
#[command(name = "ossd", version, about = "Deterministic open-set self-training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score embeddings with one of the ID-ness scoring functions.
    Score {
        /// Embeddings file (binary OSSD block or CSV with f0..f{d-1} header).
        #[arg(long)]
        embeddings: PathBuf,
        /// msp | iac | energy | entropy | mahalanobis | euclidean
        #[arg(long)]
        kind: String,
        /// Classifier model (required for msp/iac/energy/entropy; optional
        /// for distance kinds, which then score its hidden activations).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Class statistics (required for mahalanobis/euclidean).
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Number of foreground classes K. Defaults to the model's output
        /// count, minus one for iac.
        #[arg(long)]
        id_classes: Option<usize>,
        /// Temperature for the energy score.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Compute AUROC and FPR@TNR{50,75,95} from two score files.
    Eval {
        /// Scores of in-distribution samples (one per line, or index,score).
        #[arg(long)]
        id_scores: PathBuf,
        /// Scores of out-of-distribution samples.
        #[arg(long)]
        ood_scores: PathBuf,
    },
    /// Run one self-training pipeline and write telemetry CSVs.
    Simulate {
        /// key=value config file; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// baseline | offline | online
        #[arg(long)]
        mode: String,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for telemetry.csv, summary.csv, and models.
        #[arg(long)]
        out: PathBuf,
        /// Config override, e.g. --set iters_ssod=500 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run a mode x seed grid and write per-run telemetry plus an aggregate.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated modes, e.g. baseline,offline
        #[arg(long)]
        modes: String,
        /// Comma-separated seeds, e.g. 0,1,2,3,4
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        /// Run sequentially instead of in parallel.
        #[arg(long)]
        serial: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Score {
            embeddings,
            kind,
            model,
            stats,
            id_classes,
            temperature,
        } => cmd_score(&ScoreArgs {
            embeddings,
            kind,
            model: model.as_deref(),
            stats: stats.as_deref(),
            id_classes: *id_classes,
            temperature: *temperature,
        })
        .map(Some),
        Command::Eval {
            id_scores,
            ood_scores,
        } => cmd_eval(id_scores, ood_scores).map(Some),
        Command::Simulate {
            config,
            mode,
            seed,
            out,
            set,
        } => cmd_simulate(config.as_deref(), mode, *seed, out, set).map(|()| None),
        Command::Sweep {
            config,
            modes,
            seeds,
            out,
            serial,
            set,
        } => cmd_sweep(config.as_deref(), modes, seeds, out, *serial, set).map(|()| None),
    };

    match outcome {
        Ok(Some(text)) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(text.as_bytes()).is_err() {
                std::process::exit(3);
            }
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
