//! Experiment front-end: layered configuration, run directories and the five commands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::data::{generate_corpus, read_corpus, write_corpus, EncodedPair, SyntheticTask, TaskKind, Vocab};
use crate::eval::{
    confidence_histogram, corpus_bleu, paired_bootstrap, translate, ConfidenceReport, TABLE_EDGES,
};
use crate::model::ModelConfig;
use crate::selection::MaskPlanRecord;
use crate::trainer::{Checkpoint, LineSink, RunOutputs, RunSummary, TrainConfig, Trainer};

pub const SEED_ENV: &str = "SEQKD_SEED";
pub const RUN_DIR_ENV: &str = "SEQKD_RUN_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: TaskKind,
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub swap_prob: f64,
    pub noise_rate: f64,
    pub seed: u64,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    /// Corpus directory; empty means `<run dir>/data`.
    pub dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        let t = SyntheticTask::default();
        Self {
            kind: t.kind,
            alphabet: t.alphabet,
            min_len: t.min_len,
            max_len: t.max_len,
            swap_prob: t.swap_prob,
            noise_rate: t.noise_rate,
            seed: t.seed,
            train_size: 20_000,
            valid_size: 1_000,
            test_size: 1_000,
            dir: String::new(),
        }
    }
}

impl DataConfig {
    pub fn task(&self) -> SyntheticTask {
        SyntheticTask {
            kind: self.kind,
            alphabet: self.alphabet,
            min_len: self.min_len,
            max_len: self.max_len,
            swap_prob: self.swap_prob,
            noise_rate: self.noise_rate,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beam_size: usize,
    /// Decoding may run this many tokens past the source length.
    pub decode_extra: usize,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub confidence_edges: Vec<f64>,
    /// Token budget for teacher-forced evaluation batches.
    pub token_budget: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            decode_extra: 10,
            bootstrap_resamples: 1000,
            bootstrap_seed: 1,
            confidence_edges: TABLE_EDGES.to_vec(),
            token_budget: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub run: RunConfig,
}

/// Parses a flag value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `section.key` (or a bare key that names exactly one field) in a config table.
fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let known = toml::Table::try_from(ExperimentConfig::default())?;
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => (s.to_string(), f.to_string()),
        None => {
            let owners: Vec<&String> = known
                .iter()
                .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
                .map(|(s, _)| s)
                .collect();
            match owners.as_slice() {
                [one] => ((*one).clone(), key.to_string()),
                [] => bail!("unknown config key `{key}`"),
                many => {
                    let opts: Vec<String> = many.iter().map(|s| format!("--{s}.{key}")).collect();
                    bail!("ambiguous config key `{key}`: use one of {}", opts.join(", "))
                }
            }
        }
    };
    let Some(default) = known
        .get(&section)
        .and_then(|v| v.as_table())
        .and_then(|t| t.get(&field))
    else {
        bail!("unknown config key `{section}.{field}`");
    };
    // `--lambda 1` should not be a type error.
    let value = match (default, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    let sect = table
        .entry(section.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| anyhow!("`{section}` must be a table"))?;
    sect.insert(field, value);
    Ok(())
}

impl ExperimentConfig {
    /// File, then environment (`SEQKD_SEED`, `SEQKD_RUN_DIR`), then `--key value` overrides.
    pub fn resolve(path: Option<&Path>, env: &[(String, String)], overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("cannot parse config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in env {
            match k.as_str() {
                SEED_ENV => {
                    let seed: u64 = v.parse().with_context(|| format!("{SEED_ENV}={v} is not a seed"))?;
                    set_key(&mut table, "train.seed", toml::Value::Integer(seed as i64))?
                }
                RUN_DIR_ENV => set_key(&mut table, "run.dir", toml::Value::String(v.clone()))?,
                _ => {}
            }
        }
        for (k, v) in overrides {
            set_key(&mut table, k, parse_value(v)).with_context(|| format!("bad override --{k}"))?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the two supported variables from the process environment.
    pub fn env_overrides() -> Vec<(String, String)> {
        [SEED_ENV, RUN_DIR_ENV]
            .iter()
            .filter_map(|k| std::env::var(k).ok().map(|v| (k.to_string(), v)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.task().validate()?;
        if self.data.train_size == 0 || self.data.valid_size == 0 || self.data.test_size == 0 {
            bail!("data split sizes must be positive");
        }
        if self.data.max_len > self.model.max_len {
            bail!(
                "data.max_len = {} exceeds model.max_len = {}",
                self.data.max_len,
                self.model.max_len
            );
        }
        if self.eval.beam_size == 0 {
            bail!("eval.beam_size must be at least 1");
        }
        if self.eval.bootstrap_resamples < 1000 {
            bail!("eval.bootstrap_resamples must be at least 1000");
        }
        if self.eval.token_budget == 0 {
            bail!("eval.token_budget must be positive");
        }
        ConfidenceReport::from_values(&[0.0], &self.eval.confidence_edges)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn run_dir(&self) -> RunDir {
        RunDir::new(&self.run.dir)
    }

    pub fn data_dir(&self) -> PathBuf {
        if self.data.dir.is_empty() {
            self.run_dir().data()
        } else {
            PathBuf::from(&self.data.dir)
        }
    }
}

/// Fixed layout: config snapshots, `checkpoints/`, `metrics.log`, `reports/`, `data/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn checkpoints(&self, stage: u8) -> PathBuf {
        self.root.join("checkpoints").join(format!("stage{stage}"))
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.log")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn mask_plans(&self) -> PathBuf {
        self.reports().join("mask_plans.tsv")
    }
    pub fn snapshot(&self, command: &str) -> PathBuf {
        self.root.join(format!("config.{command}.toml"))
    }

    fn write_snapshot(&self, command: &str, cfg: &ExperimentConfig) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        fs::write(self.snapshot(command), cfg.to_toml())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => bail!("unknown split `{s}` (train, valid, test)"),
        }
    }
}

/// Loaded corpus splits with their vocabulary.
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<EncodedPair>,
    pub valid: Vec<EncodedPair>,
    pub test: Vec<EncodedPair>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.txt");
        if !vocab_path.exists() {
            bail!("no corpus in {}: run `seqkd gen-data` first", dir.display());
        }
        let vocab = Vocab::load(&vocab_path)?;
        let split = |name: &str| -> Result<Vec<EncodedPair>> {
            let p = dir.join(format!("{name}.tsv"));
            let pairs = read_corpus(&p).with_context(|| format!("cannot read {}", p.display()))?;
            Ok(vocab.encode_pairs(&pairs)?)
        };
        Ok(Self {
            train: split("train")?,
            valid: split("valid")?,
            test: split("test")?,
            vocab,
        })
    }

    pub fn split(&self, s: Split) -> &[EncodedPair] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Writes `train.tsv`, `valid.tsv`, `test.tsv` and `vocab.txt`.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let d = &cfg.data;
    let all = generate_corpus(&d.task(), d.train_size + d.valid_size + d.test_size)?;
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir)?;
    let (train, rest) = all.split_at(d.train_size);
    let (valid, test) = rest.split_at(d.valid_size);
    write_corpus(&dir.join("train.tsv"), train)?;
    write_corpus(&dir.join("valid.tsv"), valid)?;
    write_corpus(&dir.join("test.tsv"), test)?;
    Vocab::build(&all).save(&dir.join("vocab.txt"))?;
    cfg.run_dir().write_snapshot("gen-data", cfg)?;
    Ok(dir)
}

/// Drops log lines a fresh or resumed run is about to rewrite.
fn trim_log(path: &Path, keep: impl Fn(&str) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let kept: String = text
        .lines()
        .filter(|l| keep(l))
        .flat_map(|l| [l, "\n"])
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

fn metrics_position(line: &str) -> Option<(u64, u64)> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    Some((v.get("stage")?.as_u64()?, v.get("step")?.as_u64()?))
}

/// Keeps other stages' records, and this stage's up to `upto` (none on a fresh run).
fn prepare_metrics(path: &Path, stage: u8, upto: Option<usize>) -> Result<()> {
    trim_log(path, |l| match metrics_position(l) {
        Some((s, step)) if s == stage as u64 => upto.is_some_and(|u| step <= u as u64),
        _ => true,
    })
}

fn outputs(run: &RunDir, stage: u8, dump_plans: bool) -> Result<RunOutputs> {
    Ok(RunOutputs {
        metrics: LineSink::append_to(&run.metrics())?,
        mask_plans: if dump_plans {
            Some(LineSink::append_to(&run.mask_plans())?)
        } else {
            None
        },
        checkpoint_dir: Some(run.checkpoints(stage)),
    })
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        bail!("{what}: no checkpoint at {}", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("{what}: cannot load {}", path.display()))
}

/// Stage 1. With `resume`, continues from `checkpoints/stage1/last.ckpt`.
pub fn train_stage1(cfg: &ExperimentConfig, resume: bool) -> Result<RunSummary> {
    let corpus = Corpus::load(&cfg.data_dir())?;
    let run = cfg.run_dir();
    let mut cfg = cfg.clone();
    cfg.model.vocab_src = corpus.vocab.len();
    cfg.model.vocab_tgt = corpus.vocab.len();
    cfg.validate()?;
    run.write_snapshot("train-stage1", &cfg)?;
    let mut trainer = if resume {
        let ck = load_checkpoint(&run.checkpoints(1).join("last.ckpt"), "resume")?;
        if ck.stage != 1 {
            bail!("resume: checkpoint is from stage {}", ck.stage);
        }
        prepare_metrics(&run.metrics(), 1, Some(ck.step))?;
        Trainer::resume(ck)?
    } else {
        prepare_metrics(&run.metrics(), 1, None)?;
        Trainer::stage1(cfg.model.clone(), cfg.train.clone())?
    };
    let mut out = outputs(&run, 1, false)?;
    Ok(trainer.run(&corpus.train, &corpus.valid, &mut out, None)?)
}

/// Stage 2 from `from` (default: this run's final stage-1 checkpoint).
pub fn train_stage2(cfg: &ExperimentConfig, from: Option<&Path>, resume: bool) -> Result<RunSummary> {
    let corpus = Corpus::load(&cfg.data_dir())?;
    let run = cfg.run_dir();
    run.write_snapshot("train-stage2", cfg)?;
    let dump = cfg.train.cbkd;
    let mut trainer = if resume {
        let ck = load_checkpoint(&run.checkpoints(2).join("last.ckpt"), "resume")?;
        if ck.stage != 2 {
            bail!("resume: checkpoint is from stage {}", ck.stage);
        }
        prepare_metrics(&run.metrics(), 2, Some(ck.step))?;
        let upto = ck.step;
        trim_log(&run.mask_plans(), |l| {
            l.parse::<MaskPlanRecord>().is_ok_and(|r| r.step <= upto)
        })?;
        Trainer::resume(ck)?
    } else {
        let default = run.checkpoints(1).join("final.ckpt");
        let path = from.map(Path::to_path_buf).unwrap_or(default);
        if !path.exists() {
            bail!(
                "stage 2 needs a stage-1 checkpoint; none at {} (run `seqkd train-stage1` first or pass --from)",
                path.display()
            );
        }
        let ck = load_checkpoint(&path, "stage 2")?;
        let t = Trainer::stage2(ck, cfg.train.clone())?;
        prepare_metrics(&run.metrics(), 2, None)?;
        if run.mask_plans().exists() {
            fs::remove_file(run.mask_plans())?;
        }
        t
    };
    let mut out = outputs(&run, 2, dump)?;
    Ok(trainer.run(&corpus.train, &corpus.valid, &mut out, None)?)
}

/// The newest final checkpoint of a run: stage 2 if present, else stage 1.
pub fn default_checkpoint(run: &RunDir) -> Result<PathBuf> {
    for stage in [2, 1] {
        let p = run.checkpoints(stage).join("final.ckpt");
        if p.exists() {
            return Ok(p);
        }
    }
    bail!("no final checkpoint under {}: train first or pass --checkpoint", run.root.display())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint: PathBuf,
    pub split: String,
    pub bleu: f64,
    pub sentences: usize,
    pub unfinished: usize,
    /// Against `compared_with`: p-value for "this system is better".
    pub p_value: Option<f64>,
    pub compared_with: Option<PathBuf>,
}

fn read_hypotheses(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read hypotheses {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

/// Beam-decodes a split, scores it, and optionally tests it against another hypothesis file.
pub fn evaluate(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    split: Split,
    compare: Option<&Path>,
) -> Result<EvalSummary> {
    let corpus = Corpus::load(&cfg.data_dir())?;
    let run = cfg.run_dir();
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint(&run)?,
    };
    let ck = load_checkpoint(&path, "evaluate")?;
    run.write_snapshot("evaluate", cfg)?;
    let pairs = corpus.split(split);
    let sources: Vec<Vec<usize>> = pairs.iter().map(|p| p.src.clone()).collect();
    let hyps = translate(&ck.bundle, &sources, cfg.eval.beam_size, cfg.eval.decode_extra)?;
    let unfinished = hyps.iter().filter(|h| !h.finished).count();
    let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|h| corpus.vocab.decode(&h.tokens)).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| corpus.vocab.decode(&p.tgt)).collect();
    let bleu = corpus_bleu(&hyp_tokens, &refs)?;
    let p_value = match compare {
        Some(other) => {
            let b = read_hypotheses(other)?;
            Some(paired_bootstrap(
                &hyp_tokens,
                &b,
                &refs,
                cfg.eval.bootstrap_resamples,
                cfg.eval.bootstrap_seed,
            )?)
        }
        None => None,
    };
    let reports = run.reports();
    fs::create_dir_all(&reports)?;
    let text: String = hyp_tokens.iter().map(|h| h.join(" ") + "\n").collect();
    fs::write(reports.join(format!("hypotheses.{}.txt", split.name())), text)?;
    let summary = EvalSummary {
        checkpoint: path,
        split: split.name().into(),
        bleu,
        sentences: pairs.len(),
        unfinished,
        p_value,
        compared_with: compare.map(Path::to_path_buf),
    };
    fs::write(
        reports.join(format!("bleu.{}.json", split.name())),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(summary)
}

/// Confidence report of a checkpoint; with `baseline`, also the before/after delta table.
pub fn analyze_confidence(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    baseline: Option<&Path>,
    split: Split,
) -> Result<(ConfidenceReport, Option<ConfidenceReport>)> {
    let corpus = Corpus::load(&cfg.data_dir())?;
    let run = cfg.run_dir();
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => default_checkpoint(&run)?,
    };
    let ck = load_checkpoint(&path, "analyze-confidence")?;
    run.write_snapshot("analyze-confidence", cfg)?;
    let pairs = corpus.split(split);
    let edges = &cfg.eval.confidence_edges;
    let report = confidence_histogram(&ck.bundle, pairs, edges, cfg.eval.token_budget)?;
    let reports = run.reports();
    fs::create_dir_all(&reports)?;
    let file = |ext: &str| reports.join(format!("confidence.{}.{ext}", split.name()));
    fs::write(file("txt"), report.table("model"))?;
    fs::write(file("jsonl"), report.json_lines("model"))?;
    fs::write(file("svg"), report.svg(&format!("gold-token probability, {}", split.name())))?;
    let before = match baseline {
        Some(b) => {
            let base = load_checkpoint(b, "baseline")?;
            let r = confidence_histogram(&base.bundle, pairs, edges, cfg.eval.token_budget)?;
            fs::write(
                reports.join(format!("confidence_delta.{}.txt", split.name())),
                r.delta_table("baseline", &report, "model"),
            )?;
            Some(r)
        }
        None => None,
    };
    Ok((report, before))
}
