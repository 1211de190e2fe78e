use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use seqkd::cli::{self, ExperimentConfig, Split};

/// Desk-scale seq2seq lab: joint NMT/CMLM training and confidence-based distillation.
///
/// Any config key can be overridden as `--section.key value` (or `--key value` when the
/// key names a single field), e.g. `--train.lambda 1.0` or `--strategy all-at-once`.
#[derive(Parser)]
#[command(name = "seqkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config with [model] [train] [data] [eval] [run] sections.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus splits and vocabulary.
    GenData(Common),
    /// Joint NMT + CMLM training.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        /// Continue from checkpoints/stage1/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Distillation (or plain fine-tuning) of the separated NMT model.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint; defaults to this run's checkpoints/stage1/final.ckpt.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Continue from checkpoints/stage2/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Beam-decode a split and report BLEU.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Hypothesis file of a second system for the paired bootstrap test.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Histogram of teacher-forced gold-token probabilities.
    AnalyzeConfidence {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Earlier checkpoint for the before/after delta table.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
}

const OWN_FLAGS: [&str; 10] = [
    "--config", "-c", "--resume", "--from", "--checkpoint", "--split", "--compare", "--baseline", "--help", "--version",
];

/// Separates config-key overrides from the flags clap knows about.
fn split_overrides(argv: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let own = OWN_FLAGS.iter().any(|f| arg == *f || arg.starts_with(&format!("{f}=")));
        match arg.strip_prefix("--") {
            Some(key) if !own && !key.is_empty() => match key.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => match it.next() {
                    Some(v) => overrides.push((key.to_string(), v)),
                    None => bail!("--{key} needs a value"),
                },
            },
            _ => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

fn run() -> Result<()> {
    let (argv, overrides) = split_overrides(std::env::args().collect())?;
    let cli = Cli::parse_from(argv);
    let env = ExperimentConfig::env_overrides();
    let load = |c: &Common| ExperimentConfig::resolve(Some(&c.config), &env, &overrides);
    match cli.command {
        Command::GenData(c) => {
            let dir = cli::gen_data(&load(&c)?)?;
            println!("corpus written to {}", dir.display());
        }
        Command::TrainStage1 { common, resume } => {
            let cfg = load(&common)?;
            let s = cli::train_stage1(&cfg, resume)?;
            println!("stage 1: {} steps, best validation NLL {:?}", s.steps, s.best_valid);
        }
        Command::TrainStage2 { common, from, resume } => {
            let cfg = load(&common)?;
            let s = cli::train_stage2(&cfg, from.as_deref(), resume)?;
            println!(
                "stage 2: {} steps, best validation NLL {:?}, {} steps without distilled words",
                s.steps, s.best_valid, s.empty_kd_steps
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            split,
            compare,
        } => {
            let cfg = load(&common)?;
            let s = cli::evaluate(&cfg, checkpoint.as_deref(), split, compare.as_deref())?;
            println!("BLEU {:.2} on {} ({} sentences, {} unfinished)", s.bleu, s.split, s.sentences, s.unfinished);
            if let Some(p) = s.p_value {
                println!("paired bootstrap p = {p:.4}");
            }
        }
        Command::AnalyzeConfidence {
            common,
            checkpoint,
            baseline,
            split,
        } => {
            let cfg = load(&common)?;
            let (after, before) = cli::analyze_confidence(&cfg, checkpoint.as_deref(), baseline.as_deref(), split)?;
            match before {
                Some(b) => print!("{}", b.delta_table("baseline", &after, "model")),
                None => print!("{}", after.table("model")),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
