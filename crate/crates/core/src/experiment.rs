//! The desk-scale comparison on one seed: joint training plus distillation against
//! joint training plus plain fine-tuning, and against an NMT-only baseline with the
//! same number of updates.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::cli::{analyze_confidence, evaluate, train_stage1, train_stage2, ExperimentConfig, RunDir, Split};
use crate::eval::ConfidenceReport;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Joint stage 1, distillation stage 2.
    pub bleu_cbkd: f64,
    /// Joint stage 1, plain fine-tuning stage 2.
    pub bleu_multi: f64,
    /// NMT-only stage 1 (λ = 1), plain fine-tuning stage 2.
    pub bleu_plain: f64,
    pub confidence_plain: ConfidenceReport,
    pub confidence_cbkd: ConfidenceReport,
    pub seconds: f64,
}

fn with_run(base: &ExperimentConfig, dir: PathBuf) -> ExperimentConfig {
    let mut c = base.clone();
    c.run.dir = dir;
    c
}

/// Runs all five trainings for `base.train.seed` under `root`. The corpus must already
/// exist at `base.data_dir()`.
pub fn run_seed(base: &ExperimentConfig, root: &Path) -> Result<SeedResult> {
    let start = Instant::now();
    let seed = base.train.seed;
    let dir = |name: &str| root.join(format!("seed{seed}")).join(name);

    let joint = with_run(base, dir("joint"));
    train_stage1(&joint, false)?;
    let joint_ckpt = RunDir::new(&joint.run.dir).checkpoints(1).join("final.ckpt");

    let mut cbkd = with_run(base, dir("cbkd"));
    cbkd.train.cbkd = true;
    train_stage2(&cbkd, Some(&joint_ckpt), false)?;

    let mut multi = with_run(base, dir("multi"));
    multi.train.cbkd = false;
    train_stage2(&multi, Some(&joint_ckpt), false)?;

    let mut plain = with_run(base, dir("plain"));
    plain.train.lambda = 1.0;
    plain.train.cbkd = false;
    train_stage1(&plain, false)?;
    train_stage2(&plain, None, false)?;

    let bleu = |c: &ExperimentConfig| evaluate(c, None, Split::Test, None).map(|s| s.bleu);
    let (bleu_cbkd, bleu_multi, bleu_plain) = (bleu(&cbkd)?, bleu(&multi)?, bleu(&plain)?);
    let plain_final = RunDir::new(&plain.run.dir).checkpoints(2).join("final.ckpt");
    let (confidence_cbkd, before) = analyze_confidence(&cbkd, None, Some(&plain_final), Split::Test)?;
    Ok(SeedResult {
        seed,
        bleu_cbkd,
        bleu_multi,
        bleu_plain,
        confidence_plain: before.expect("baseline given"),
        confidence_cbkd,
        seconds: start.elapsed().as_secs_f64(),
    })
}
