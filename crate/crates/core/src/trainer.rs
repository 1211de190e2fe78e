//! Two-stage training: joint NMT/CMLM training with a shared encoder, then distillation
//! from the frozen CMLM into the NMT model on selected target words.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{make_batches, Batch, BatchPlan, DataError, EncodedPair, PaddedSeqs, Vocab};
use crate::model::{
    Binder, Dropout, EncoderRole, MaskedBatch, ModelBundle, ModelConfig, ModelError, ParamGroup, TeacherForcing,
};
use crate::objectives::{
    cmlm_loss, joint_loss, kd_loss, nll_loss, stage2_loss, LossBreakdown, LossError, Target,
};
use crate::selection::{sample_cmlm_mask, select_variant, MaskPlan, MaskPlanRecord, SelectionError, Strategy};
use crate::tensor::{GradientTable, Graph, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"SEQKDCK\0";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("learning rate is undefined at step 0")]
    StepZero,
    #[error("training diverged at stage {stage} step {step}: {reason}")]
    Diverged { stage: u8, step: usize, reason: String },
    #[error("stage-2 step wrote gradients into frozen parameter {0}")]
    FrozenParamTouched(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the NMT loss in the stage-1 objective.
    pub lambda: f64,
    /// Confidence threshold for selecting distilled words.
    pub epsilon: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    /// Smooth the `−ln p̂*` half of the distillation term too.
    pub kd_nll_smoothing: bool,
    /// Global-norm gradient clip; 0 disables clipping.
    pub clip_norm: f64,
    pub token_budget: usize,
    pub seed: u64,
    pub strategy: Strategy,
    /// Off: stage 2 is plain NLL fine-tuning of the separated NMT model.
    pub cbkd: bool,
    /// Stage 1 gives the NMT model its own encoder instead of sharing one with the CMLM.
    pub share_encoder: bool,
    /// Run the CMLM branch even when `lambda == 1` gives it zero weight.
    pub always_run_cmlm: bool,
    pub validate_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            epsilon: 0.2,
            stage1_steps: 10_000,
            stage2_steps: 5_000,
            warmup_steps: 4000,
            adam_beta1: 0.9,
            adam_beta2: 0.998,
            adam_eps: 1e-9,
            label_smoothing: 0.1,
            kd_nll_smoothing: false,
            clip_norm: 1.0,
            token_budget: 2048,
            seed: 1,
            strategy: Strategy::Confidence,
            cbkd: true,
            share_encoder: true,
            always_run_cmlm: false,
            validate_every: 500,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        for (name, v) in [("lambda", self.lambda), ("epsilon", self.epsilon)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing = {} outside [0, 1)", self.label_smoothing));
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative".into());
        }
        for (name, v) in [
            ("stage1_steps", self.stage1_steps),
            ("stage2_steps", self.stage2_steps),
            ("warmup_steps", self.warmup_steps),
            ("token_budget", self.token_budget),
            ("validate_every", self.validate_every),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Inverse-square-root schedule with linear warmup: `d^-0.5 · min(s^-0.5, s · w^-1.5)`.
pub fn lr_at(step: usize, d_model: usize, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(TrainError::StepZero);
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Linear decay from 1 at step 0 to 0 at `total`; clamped to 0 beyond.
pub fn alpha_at(step: usize, total: usize) -> f64 {
    if step >= total {
        0.0
    } else {
        1.0 - step as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam moments keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub steps: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    bundle: &mut ModelBundle,
    grads: &GradientTable,
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::Diverged {
            stage: 0,
            step: state.steps as usize,
            reason: format!("non-finite gradient for {}", bundle.store().get(id).name),
        });
    }
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads.iter() {
        let name = bundle.store().get(id).name.clone();
        let mom = state.moments.entry(name).or_insert_with(|| Moments {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
        });
        let value = bundle.store_mut().value_mut(id).data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * gi;
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = mom.m[i] / c1;
            let vhat = mom.v[i] / c2;
            value[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales gradients to global norm `max_norm` when above it; returns the norm before clipping.
pub fn clip_gradients(grads: &mut GradientTable, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Independent random streams, one per (stage, step, purpose).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Stream {
    BatchOrder = 1,
    EncoderDropout = 2,
    SecondEncoderDropout = 3,
    NmtDecoderDropout = 4,
    CmlmDecoderDropout = 5,
    CmlmMask = 6,
    RandomSelection = 7,
}

pub fn stream_rng(seed: u64, stage: u8, step: u64, stream: Stream) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16] = stage;
    key[17] = stream as u8;
    ChaCha8Rng::from_seed(key)
}

/// Position in the epoch-by-epoch batch sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCursor {
    pub epoch: u64,
    pub batch: usize,
}

/// Deterministic endless batch stream over a corpus; each epoch reshuffles with its own seed.
pub struct BatchFeed<'a> {
    pairs: &'a [EncodedPair],
    budget: usize,
    seed: u64,
    plan: Option<(u64, BatchPlan)>,
}

impl<'a> BatchFeed<'a> {
    pub fn new(pairs: &'a [EncodedPair], budget: usize, seed: u64) -> Self {
        Self {
            pairs,
            budget,
            seed,
            plan: None,
        }
    }

    /// Batch under `cursor`, advancing it.
    pub fn next(&mut self, cursor: &mut DataCursor) -> Result<Batch> {
        loop {
            if self.plan.as_ref().map(|(e, _)| *e) != Some(cursor.epoch) {
                let seed = stream_rng(self.seed, 0, cursor.epoch, Stream::BatchOrder).gen();
                self.plan = Some((cursor.epoch, make_batches(self.pairs, self.budget, seed)?));
            }
            let plan = &self.plan.as_ref().unwrap().1;
            if cursor.batch < plan.batches.len() {
                let b = plan.batches[cursor.batch].clone();
                cursor.batch += 1;
                return Ok(b);
            }
            cursor.epoch += 1;
            cursor.batch = 0;
        }
    }
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub train: TrainConfig,
    pub bundle: ModelBundle,
    pub stage: u8,
    /// Steps completed in `stage`.
    pub step: usize,
    /// Steps completed by stage 1 (offsets the learning-rate schedule in stage 2).
    pub stage1_steps_done: usize,
    pub adam: AdamState,
    pub cursor: DataCursor,
    pub best_valid: Option<f64>,
    pub fingerprint: String,
}

/// Hex SHA-256 over the JSON form of both configs.
pub fn config_fingerprint(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(model, train)).expect("configs serialise");
    Sha256::digest(json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let body = bincode::serialize(self).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = BufWriter::new(File::create(&tmp)?);
            f.write_all(CHECKPOINT_MAGIC)?;
            f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            f.write_all(&body)?;
            f.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| TrainError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "{} has version {version}, this build reads {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        bincode::deserialize(&bytes[12..]).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }
}

/// Line-delimited JSON metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsRecord {
    Train {
        step: usize,
        global_step: usize,
        lr: f64,
        grad_norm: f64,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Valid {
        stage: u8,
        step: usize,
        nll_per_token: f64,
        tokens: usize,
        best: bool,
    },
    Warning {
        stage: u8,
        step: usize,
        message: String,
    },
}

/// Appends to an optional file and keeps every line in memory.
#[derive(Default)]
pub struct LineSink {
    file: Option<BufWriter<File>>,
    pub lines: Vec<String>,
}

impl LineSink {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Some(BufWriter::new(f)),
            lines: Vec::new(),
        })
    }

    pub fn push(&mut self, line: String) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

/// Where a run writes as it goes. All optional.
#[derive(Default)]
pub struct RunOutputs {
    pub metrics: LineSink,
    /// Stage 2 only: one [`MaskPlanRecord`] per sentence per step.
    pub mask_plans: Option<LineSink>,
    /// Receives `last.ckpt` periodically and on divergence, plus `best.ckpt` and `final.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub stage: u8,
    pub steps: usize,
    pub final_loss: Option<LossBreakdown>,
    pub best_valid: Option<f64>,
    /// Stage 2: steps whose selection produced no distilled word.
    pub empty_kd_steps: usize,
}

/// Teacher distributions for the words selected in a batch.
pub struct TeacherOutput {
    /// `(row, position) -> q̂` for every selected word.
    pub q: HashMap<(usize, usize), Vec<f64>>,
    /// Per row: observed (non-[M]) words in each CMLM input built for it.
    pub observed_counts: Vec<Vec<usize>>,
}

/// Runs the frozen CMLM (evaluation mode) once per pass of the plans. Rows whose plan
/// is empty in a pass are left out of that pass.
pub fn teacher_distributions(bundle: &ModelBundle, src: &PaddedSeqs, tgt: &PaddedSeqs, plans: &[MaskPlan]) -> Result<TeacherOutput> {
    let vocab = bundle.config().vocab_tgt;
    let mut out = TeacherOutput {
        q: HashMap::new(),
        observed_counts: vec![Vec::new(); plans.len()],
    };
    if plans.iter().all(|p| p.passes().is_empty()) {
        return Ok(out);
    }
    let g = Graph::no_grad();
    let b = Binder::frozen(&g, bundle);
    let enc = bundle.encode(&b, EncoderRole::Shared, src, &mut Dropout::eval())?;
    let pass_sets: Vec<Vec<&[usize]>> = plans.iter().map(MaskPlan::passes).collect();
    let passes = pass_sets.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..passes {
        let rows: Vec<usize> = (0..plans.len()).filter(|&r| pass_sets[r].len() > k).collect();
        let sub_tgt = PaddedSeqs::from_seqs(rows.iter().map(|&r| tgt.row(r)), Vocab::PAD_ID);
        let masks: Vec<Vec<usize>> = rows.iter().map(|&r| pass_sets[r][k].to_vec()).collect();
        let batch = MaskedBatch::new(&sub_tgt, masks)?;
        let sub_enc = enc.select(&rows)?;
        let cm = bundle.cmlm_forward(&b, &sub_enc, &batch, &mut Dropout::eval())?;
        let probs = cm.probs.value();
        for (i, &(sr, t)) in cm.positions.iter().enumerate() {
            out.q.insert((rows[sr], t), probs.row(i).to_vec());
        }
        for (sr, &r) in rows.iter().enumerate() {
            let observed = batch.observed.row(sr).iter().filter(|&&id| id != Vocab::MASK_ID).count();
            out.observed_counts[r].push(observed);
        }
    }
    debug_assert!(out.q.values().all(|q| q.len() == vocab));
    Ok(out)
}

/// Mean unsmoothed NMT NLL per target token (including [EOS]) in evaluation mode.
pub fn validation_nll(bundle: &ModelBundle, pairs: &[EncodedPair], budget: usize) -> Result<(f64, usize)> {
    let plan = make_batches(pairs, budget, 0)?;
    let mut total = 0.0;
    let mut tokens = 0;
    for batch in &plan.batches {
        let g = Graph::no_grad();
        let b = Binder::frozen(&g, bundle);
        let enc = bundle.encode(&b, EncoderRole::Nmt, &batch.src, &mut Dropout::eval())?;
        let out = bundle.nmt_forward(&b, &enc, &batch.tgt, &mut Dropout::eval())?;
        let targets = gold_targets(&out.teacher);
        total += nll_loss(out.probs, &targets, 0.0)?.item();
        tokens += targets.len();
    }
    Ok((total / tokens as f64, tokens))
}

/// Every gold token of a teacher-forced batch, [EOS] included.
pub fn gold_targets(tf: &TeacherForcing) -> Vec<Target> {
    tf.gold
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.map(|gold| Target::new(i, gold)))
        .collect()
}

/// A training run in progress: model, optimizer and data position for one stage.
pub struct Trainer {
    ckpt: Checkpoint,
    best: Option<Checkpoint>,
    empty_kd_steps: usize,
}

impl Trainer {
    /// Fresh stage-1 run.
    pub fn stage1(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let bundle = ModelBundle::new(model.clone(), train.seed, !train.share_encoder)?;
        let fingerprint = config_fingerprint(&model, &train);
        Ok(Self::from_checkpoint(Checkpoint {
            version: CHECKPOINT_VERSION,
            train,
            bundle,
            stage: 1,
            step: 0,
            stage1_steps_done: 0,
            adam: AdamState::default(),
            cursor: DataCursor::default(),
            best_valid: None,
            fingerprint,
        }))
    }

    /// Stage 2 from a stage-1 checkpoint: separates the encoder, freezes the CMLM side and
    /// starts a fresh optimizer. Data position carries over.
    pub fn stage2(from: Checkpoint, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        if from.stage != 1 {
            return Err(TrainError::Checkpoint(format!(
                "stage 2 needs a stage-1 checkpoint, got stage {}",
                from.stage
            )));
        }
        let mut bundle = from.bundle;
        bundle.separate_encoder()?;
        let fingerprint = config_fingerprint(bundle.config(), &train);
        Ok(Self::from_checkpoint(Checkpoint {
            version: CHECKPOINT_VERSION,
            train,
            bundle,
            stage: 2,
            step: 0,
            stage1_steps_done: from.step,
            adam: AdamState::default(),
            cursor: from.cursor,
            best_valid: None,
            fingerprint,
        }))
    }

    /// Continues exactly where `ckpt` left off.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let expect = config_fingerprint(ckpt.bundle.config(), &ckpt.train);
        if expect != ckpt.fingerprint {
            return Err(TrainError::Checkpoint("config fingerprint mismatch".into()));
        }
        Ok(Self::from_checkpoint(ckpt))
    }

    fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self {
            ckpt,
            best: None,
            empty_kd_steps: 0,
        }
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ckpt
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.ckpt.bundle
    }

    pub fn stage(&self) -> u8 {
        self.ckpt.stage
    }

    pub fn steps_total(&self) -> usize {
        match self.ckpt.stage {
            1 => self.ckpt.train.stage1_steps,
            _ => self.ckpt.train.stage2_steps,
        }
    }

    pub fn is_done(&self) -> bool {
        self.ckpt.step >= self.steps_total()
    }

    fn trainable(&self) -> Vec<ParamGroup> {
        match self.ckpt.stage {
            1 => self.ckpt.bundle.groups(),
            _ => vec![ParamGroup::NmtEncoder, ParamGroup::NmtDecoder],
        }
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self, feed: &mut BatchFeed<'_>, outputs: &mut RunOutputs) -> Result<(LossBreakdown, f64, f64)> {
        let mut cursor = self.ckpt.cursor;
        let batch = feed.next(&mut cursor)?;
        let step = self.ckpt.step + 1;
        let global = self.ckpt.stage1_steps_done + step;
        let lr = lr_at(global, self.ckpt.bundle.config().d_model, self.ckpt.train.warmup_steps)?;
        let stage = self.ckpt.stage;
        let (mut grads, loss) = match stage {
            1 => self.stage1_gradients(&batch, step),
            _ => self.stage2_gradients(&batch, step, outputs),
        }
        .map_err_div(stage, step)?;
        if stage == 2 {
            if let Some((id, _)) = grads.iter().find(|(id, _)| {
                matches!(self.ckpt.bundle.store().get(*id).group, ParamGroup::Encoder | ParamGroup::CmlmDecoder)
            }) {
                return Err(TrainError::FrozenParamTouched(self.ckpt.bundle.store().get(id).name.clone()));
            }
        }
        if !loss.total.is_finite() {
            return Err(TrainError::Diverged {
                stage,
                step,
                reason: "non-finite loss".into(),
            });
        }
        let norm = clip_gradients(&mut grads, self.ckpt.train.clip_norm);
        let adam_cfg = self.ckpt.train.adam();
        adam_step(&mut self.ckpt.bundle, &grads, &mut self.ckpt.adam, lr, adam_cfg).map_err(|e| match e {
            TrainError::Diverged { reason, .. } => TrainError::Diverged { stage, step, reason },
            other => other,
        })?;
        self.ckpt.step = step;
        self.ckpt.cursor = cursor;
        if loss.kd_tokens == 0 && stage == 2 && self.ckpt.train.cbkd {
            self.empty_kd_steps += 1;
        }
        Ok((loss, lr, norm))
    }

    fn dropout(&self, step: usize, stream: Stream) -> Dropout {
        let p = self.ckpt.bundle.config().dropout;
        Dropout::with_rng(p, stream_rng(self.ckpt.train.seed, self.ckpt.stage, step as u64, stream))
    }

    fn stage1_gradients(&self, batch: &Batch, step: usize) -> Result<(GradientTable, LossBreakdown)> {
        let cfg = &self.ckpt.train;
        let bundle = &self.ckpt.bundle;
        let g = Graph::new();
        let b = Binder::new(&g, bundle, &self.trainable());
        let enc_nmt = bundle.encode(&b, EncoderRole::Nmt, &batch.src, &mut self.dropout(step, Stream::EncoderDropout))?;
        let nmt = bundle.nmt_forward(&b, &enc_nmt, &batch.tgt, &mut self.dropout(step, Stream::NmtDecoderDropout))?;
        let nmt_targets = gold_targets(&nmt.teacher);
        let n = nmt_targets.len();
        let l_nmt = nll_loss(nmt.probs, &nmt_targets, cfg.label_smoothing)?;
        let mut breakdown = LossBreakdown {
            stage: 1,
            lambda: cfg.lambda,
            nmt_term: l_nmt.item(),
            nmt_tokens: n,
            normalizer: n,
            ..Default::default()
        };
        let objective = if cfg.lambda < 1.0 || cfg.always_run_cmlm {
            let enc_cmlm = if bundle.has_separate_nmt_encoder() {
                bundle.encode(&b, EncoderRole::Shared, &batch.src, &mut self.dropout(step, Stream::SecondEncoderDropout))?
            } else {
                enc_nmt
            };
            let mut mask_rng = stream_rng(cfg.seed, 1, step as u64, Stream::CmlmMask);
            let masks = (0..batch.tgt.rows)
                .map(|r| sample_cmlm_mask(batch.tgt.lens[r], &mut mask_rng))
                .collect();
            let mb = MaskedBatch::new(&batch.tgt, masks)?;
            let cm = bundle.cmlm_forward(&b, &enc_cmlm, &mb, &mut self.dropout(step, Stream::CmlmDecoderDropout))?;
            let targets: Vec<Target> = cm
                .positions
                .iter()
                .enumerate()
                .map(|(i, &(r, t))| Target::new(i, mb.gold_at(r, t)))
                .collect();
            let l_cmlm = cmlm_loss(cm.probs, &targets, cfg.label_smoothing)?;
            breakdown.cmlm_term = l_cmlm.item();
            breakdown.cmlm_tokens = targets.len();
            joint_loss(l_nmt, l_cmlm, cfg.lambda)?
        } else {
            l_nmt
        };
        let total = objective.scale(1.0 / n as f64)?;
        breakdown.total = total.item();
        Ok((g.backprop(total)?, breakdown))
    }

    fn stage2_gradients(&self, batch: &Batch, step: usize, outputs: &mut RunOutputs) -> Result<(GradientTable, LossBreakdown)> {
        let cfg = &self.ckpt.train;
        let bundle = &self.ckpt.bundle;
        let vocab = bundle.config().vocab_tgt;
        let g = Graph::new();
        let b = Binder::new(&g, bundle, &self.trainable());
        let enc = bundle.encode(&b, EncoderRole::Nmt, &batch.src, &mut self.dropout(step, Stream::EncoderDropout))?;
        let nmt = bundle.nmt_forward(&b, &enc, &batch.tgt, &mut self.dropout(step, Stream::NmtDecoderDropout))?;
        let tf = &nmt.teacher;
        let all = gold_targets(tf);
        let n = all.len();
        let alpha = alpha_at(step - 1, cfg.stage2_steps);
        let mut breakdown = LossBreakdown {
            stage: 2,
            alpha,
            normalizer: n,
            ..Default::default()
        };
        if !cfg.cbkd {
            breakdown.alpha = 0.0;
            let l = nll_loss(nmt.probs, &all, cfg.label_smoothing)?;
            breakdown.observed_nll_term = l.item();
            breakdown.observed_tokens = n;
            let total = l.scale(1.0 / n as f64)?;
            breakdown.total = total.item();
            return Ok((g.backprop(total)?, breakdown));
        }

        let probs = nmt.probs.value();
        let mut sel_rng = stream_rng(cfg.seed, 2, step as u64, Stream::RandomSelection);
        let mut plans = Vec::with_capacity(batch.tgt.rows);
        for r in 0..batch.tgt.rows {
            let gold = batch.tgt.row(r);
            let mut conf = Vec::with_capacity(gold.len());
            let mut argmax = Vec::with_capacity(gold.len());
            for (t, &y) in gold.iter().enumerate() {
                let p = probs.row(tf.index(r, t));
                conf.push(p[y]);
                argmax.push(argmax_of(p));
            }
            plans.push(select_variant(cfg.strategy, &conf, Some(&argmax), gold, cfg.epsilon, &mut sel_rng)?);
        }
        let teacher = teacher_distributions(bundle, &batch.src, &batch.tgt, &plans)?;

        let mut kd_targets = Vec::new();
        let mut q_flat = Vec::new();
        let mut kd_rows = Vec::new();
        let mut in_kd = vec![false; probs.rows()];
        for (r, plan) in plans.iter().enumerate() {
            for &t in &plan.positions {
                let row = tf.index(r, t);
                kd_targets.push(Target::new(row, batch.tgt.row(r)[t]));
                q_flat.extend_from_slice(&teacher.q[&(r, t)]);
                kd_rows.push(row);
                in_kd[row] = true;
            }
        }
        debug_assert_eq!(q_flat.len(), kd_targets.len() * vocab);
        let observed: Vec<Target> = all.iter().copied().filter(|t| !in_kd[t.row]).collect();
        let kd_smoothing = if cfg.kd_nll_smoothing { cfg.label_smoothing } else { 0.0 };
        let kd = kd_loss(nmt.probs, &kd_targets, &q_flat, alpha, kd_smoothing)?;
        let s2 = stage2_loss(kd.loss, &kd_rows, nmt.probs, &observed, cfg.label_smoothing)?;
        breakdown.kd_kl_term = kd.kl;
        breakdown.kd_nll_term = kd.nll;
        breakdown.kd_tokens = kd.tokens;
        breakdown.observed_nll_term = s2.observed;
        breakdown.observed_tokens = observed.len();
        let total = s2.loss.scale(1.0 / n as f64)?;
        breakdown.total = total.item();

        if let Some(sink) = &mut outputs.mask_plans {
            for (r, plan) in plans.iter().enumerate() {
                let subsets = if plan.strategy == Strategy::PartToAll {
                    plan.subsets.clone()
                } else {
                    vec![plan.positions.clone()]
                };
                let rec = MaskPlanRecord {
                    step,
                    sentence: batch.indices[r],
                    strategy: plan.strategy,
                    len: batch.tgt.lens[r],
                    subsets,
                    cmlm_observed: teacher.observed_counts[r].clone(),
                };
                sink.push(rec.to_string())?;
            }
        }
        Ok((g.backprop(total)?, breakdown))
    }

    /// Trains until the stage's step count (or `stop_after` steps in this call), validating
    /// and checkpointing along the way.
    pub fn run(
        &mut self,
        train: &[EncodedPair],
        valid: &[EncodedPair],
        outputs: &mut RunOutputs,
        stop_after: Option<usize>,
    ) -> Result<RunSummary> {
        let cfg = self.ckpt.train.clone();
        let mut feed = BatchFeed::new(train, cfg.token_budget, cfg.seed);
        let mut last = None;
        let mut taken = 0;
        while !self.is_done() && stop_after.map_or(true, |m| taken < m) {
            let (loss, lr, norm) = match self.step(&mut feed, outputs) {
                Ok(v) => v,
                Err(e) => {
                    if let Some(dir) = &outputs.checkpoint_dir {
                        self.ckpt.save(&dir.join("last.ckpt"))?;
                    }
                    outputs.metrics.flush()?;
                    return Err(e);
                }
            };
            taken += 1;
            let step = self.ckpt.step;
            let rec = MetricsRecord::Train {
                step,
                global_step: self.ckpt.stage1_steps_done + step,
                lr,
                grad_norm: norm,
                loss: loss.clone(),
            };
            outputs.metrics.push(serde_json::to_string(&rec).expect("metrics serialise"))?;
            last = Some(loss);
            if !valid.is_empty() && (step % cfg.validate_every == 0 || self.is_done()) {
                self.validate(valid, outputs)?;
            }
            if let Some(dir) = &outputs.checkpoint_dir {
                if step % cfg.checkpoint_every == 0 {
                    self.ckpt.save(&dir.join("last.ckpt"))?;
                }
            }
        }
        if self.ckpt.stage == 2 && self.is_done() && cfg.cbkd {
            let frac = self.empty_kd_steps as f64 / self.ckpt.step.max(1) as f64;
            if frac > 0.95 {
                let message = format!(
                    "{:.1}% of steps selected no word for distillation; epsilon = {} may be degenerate",
                    100.0 * frac,
                    cfg.epsilon
                );
                eprintln!("warning: {message}");
                let rec = MetricsRecord::Warning {
                    stage: 2,
                    step: self.ckpt.step,
                    message,
                };
                outputs.metrics.push(serde_json::to_string(&rec).expect("metrics serialise"))?;
            }
        }
        outputs.metrics.flush()?;
        if let Some(sink) = &mut outputs.mask_plans {
            sink.flush()?;
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            self.ckpt.save(&dir.join("last.ckpt"))?;
            if self.is_done() {
                self.ckpt.save(&dir.join("final.ckpt"))?;
            }
            if let Some(best) = &self.best {
                best.save(&dir.join("best.ckpt"))?;
            }
        }
        Ok(RunSummary {
            stage: self.ckpt.stage,
            steps: self.ckpt.step,
            final_loss: last,
            best_valid: self.ckpt.best_valid,
            empty_kd_steps: self.empty_kd_steps,
        })
    }

    fn validate(&mut self, valid: &[EncodedPair], outputs: &mut RunOutputs) -> Result<()> {
        let (nll, tokens) = validation_nll(&self.ckpt.bundle, valid, self.ckpt.train.token_budget)?;
        let best = self.ckpt.best_valid.map_or(true, |b| nll < b);
        if best {
            self.ckpt.best_valid = Some(nll);
            self.best = Some(self.ckpt.clone());
        }
        let rec = MetricsRecord::Valid {
            stage: self.ckpt.stage,
            step: self.ckpt.step,
            nll_per_token: nll,
            tokens,
            best,
        };
        outputs.metrics.push(serde_json::to_string(&rec).expect("metrics serialise"))
    }
}

fn argmax_of(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

trait DivergenceExt<T> {
    fn map_err_div(self, stage: u8, step: usize) -> Result<T>;
}

impl<T> DivergenceExt<T> for Result<T> {
    /// Non-finite activations inside the forward pass count as divergence.
    fn map_err_div(self, stage: u8, step: usize) -> Result<T> {
        self.map_err(|e| match e {
            TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op }))
            | TrainError::Loss(LossError::Tensor(TensorError::NonFinite { op })) => TrainError::Diverged {
                stage,
                step,
                reason: format!("non-finite value in {op}"),
            },
            other => other,
        })
    }
}
