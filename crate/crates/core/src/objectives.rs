//! Loss functions over distribution tensors `[rows, vocab]`.
//!
//! Every loss is linear in `ln max(p, PROB_FLOOR)`, so each is one weighted sum over a
//! floored log. All losses here are sums over tokens; the trainer divides by the
//! batch token count.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Vocab;
use crate::tensor::{Tensor, TensorError};

/// Lower bound applied inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("gold id {gold} outside vocabulary of {vocab}")]
    GoldOutOfVocab { gold: usize, vocab: usize },
    #[error("row {row} outside {rows} distributions")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("{name} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("the CMLM loss needs at least one masked token")]
    EmptyMaskedSet,
    #[error("distribution row {0} appears in both the distilled and the observed sets")]
    OverlappingPartition(usize),
    #[error("teacher has {teacher} rows of width {width}, expected {expected} rows of width {vocab}")]
    TeacherShape {
        teacher: usize,
        width: usize,
        expected: usize,
        vocab: usize,
    },
}

pub type Result<T> = std::result::Result<T, LossError>;

/// One supervised token: the distribution row and its gold id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub row: usize,
    pub gold: usize,
}

impl Target {
    pub fn new(row: usize, gold: usize) -> Self {
        Self { row, gold }
    }
}

fn check_unit(name: &'static str, value: f64, closed_top: bool) -> Result<()> {
    let ok = value >= 0.0 && if closed_top { value <= 1.0 } else { value < 1.0 };
    if ok {
        Ok(())
    } else {
        Err(LossError::OutOfRange {
            name,
            value,
            lo: 0.0,
            hi: 1.0,
        })
    }
}

fn dims(probs: &Tensor<'_>) -> (usize, usize) {
    let shape = probs.shape();
    let vocab = *shape.last().unwrap();
    (probs.len() / vocab, vocab)
}

fn check_targets(targets: &[Target], rows: usize, vocab: usize) -> Result<()> {
    for t in targets {
        if t.gold >= vocab {
            return Err(LossError::GoldOutOfVocab { gold: t.gold, vocab });
        }
        if t.row >= rows {
            return Err(LossError::RowOutOfRange { row: t.row, rows });
        }
    }
    Ok(())
}

/// Adds `scale` times the smoothed target for `gold` into `w`: `1 - eps` on gold and
/// `eps / (V - 2)` on every other non-pad entry.
fn add_smoothed(w: &mut [f64], gold: usize, eps: f64, scale: f64) {
    let vocab = w.len();
    if eps > 0.0 {
        let spread = scale * eps / (vocab - 2) as f64;
        for (v, slot) in w.iter_mut().enumerate() {
            if v != gold && v != Vocab::PAD_ID {
                *slot += spread;
            }
        }
    }
    w[gold] += scale * (1.0 - eps);
}

/// Cross-entropy of each target row against its label-smoothed gold, summed.
pub fn nll_loss<'g>(probs: Tensor<'g>, targets: &[Target], smoothing: f64) -> Result<Tensor<'g>> {
    check_unit("label smoothing", smoothing, false)?;
    let (rows, vocab) = dims(&probs);
    check_targets(targets, rows, vocab)?;
    let mut w = vec![0.0; rows * vocab];
    for t in targets {
        add_smoothed(&mut w[t.row * vocab..(t.row + 1) * vocab], t.gold, smoothing, -1.0);
    }
    Ok(probs.log(PROB_FLOOR)?.weighted_sum(w)?)
}

/// NLL restricted to masked tokens; rejects an empty masked set.
pub fn cmlm_loss<'g>(probs: Tensor<'g>, targets: &[Target], smoothing: f64) -> Result<Tensor<'g>> {
    if targets.is_empty() {
        return Err(LossError::EmptyMaskedSet);
    }
    nll_loss(probs, targets, smoothing)
}

/// `λ·l_nmt + (1−λ)·l_cmlm`.
pub fn joint_loss<'g>(l_nmt: Tensor<'g>, l_cmlm: Tensor<'g>, lambda: f64) -> Result<Tensor<'g>> {
    check_unit("lambda", lambda, true)?;
    Ok(l_nmt.scale(lambda)?.add(l_cmlm.scale(1.0 - lambda)?)?)
}

/// `Σ_v q(v)·(ln q(v) − ln p(v))` with `0·ln 0 = 0` and both logs floored.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qv, _)| qv > 0.0)
        .map(|(&qv, &pv)| qv * (qv.max(PROB_FLOOR).ln() - pv.max(PROB_FLOOR).ln()))
        .sum()
}

/// Distillation over selected tokens, plus its two unweighted parts.
pub struct KdLoss<'g> {
    pub loss: Tensor<'g>,
    /// `Σ KL(q̂_t ‖ p̂_t)`.
    pub kl: f64,
    /// `Σ −ln p̂*_t` (smoothed when requested).
    pub nll: f64,
    pub tokens: usize,
}

/// `Σ_t [α·KL(q̂_t‖p̂_t) − (1−α)·ln p̂*_t]` over `targets`, with teacher row `i` paired
/// with `targets[i]`. The teacher is a plain array, so no gradient reaches it.
pub fn kd_loss<'g>(
    student: Tensor<'g>,
    targets: &[Target],
    teacher: &[f64],
    alpha: f64,
    nll_smoothing: f64,
) -> Result<KdLoss<'g>> {
    check_unit("alpha", alpha, true)?;
    check_unit("label smoothing", nll_smoothing, false)?;
    let (rows, vocab) = dims(&student);
    check_targets(targets, rows, vocab)?;
    if teacher.len() != targets.len() * vocab {
        return Err(LossError::TeacherShape {
            teacher: teacher.len() / vocab.max(1),
            width: vocab,
            expected: targets.len(),
            vocab,
        });
    }
    let mut w = vec![0.0; rows * vocab];
    let mut q_log_q = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let q = &teacher[i * vocab..(i + 1) * vocab];
        let slot = &mut w[t.row * vocab..(t.row + 1) * vocab];
        for (v, &qv) in q.iter().enumerate() {
            if qv > 0.0 {
                slot[v] -= alpha * qv;
                q_log_q += qv * qv.max(PROB_FLOOR).ln();
            }
        }
        add_smoothed(slot, t.gold, nll_smoothing, -(1.0 - alpha));
    }
    let logp = student.log(PROB_FLOOR)?;
    let (kl, nll) = logp.with_data(|lp| {
        let mut kl = q_log_q;
        let mut nll = 0.0;
        let mut unit = vec![0.0; vocab];
        for (i, t) in targets.iter().enumerate() {
            let row = &lp[t.row * vocab..(t.row + 1) * vocab];
            let q = &teacher[i * vocab..(i + 1) * vocab];
            kl -= q.iter().zip(row).filter(|(&qv, _)| qv > 0.0).map(|(qv, l)| qv * l).sum::<f64>();
            unit.fill(0.0);
            add_smoothed(&mut unit, t.gold, nll_smoothing, -1.0);
            nll += unit.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
        (kl, nll)
    });
    let constant = student.graph().constant_from(vec![1], vec![alpha * q_log_q])?;
    let loss = logp.weighted_sum(w)?.add(constant)?;
    Ok(KdLoss {
        loss,
        kl,
        nll,
        tokens: targets.len(),
    })
}

/// Stage-2 objective and its observed-token part.
pub struct Stage2Loss<'g> {
    pub loss: Tensor<'g>,
    /// `Σ −ln p̂*_t` over observed tokens (smoothed as requested).
    pub observed: f64,
}

/// Distillation part plus NLL over the observed tokens. `kd_rows` are the student rows
/// consumed by the distillation part; they must not reappear among `observed`.
pub fn stage2_loss<'g>(
    kd_part: Tensor<'g>,
    kd_rows: &[usize],
    student: Tensor<'g>,
    observed: &[Target],
    smoothing: f64,
) -> Result<Stage2Loss<'g>> {
    let kd: std::collections::HashSet<usize> = kd_rows.iter().copied().collect();
    if let Some(t) = observed.iter().find(|t| kd.contains(&t.row)) {
        return Err(LossError::OverlappingPartition(t.row));
    }
    let obs = nll_loss(student, observed, smoothing)?;
    Ok(Stage2Loss {
        loss: kd_part.add(obs)?,
        observed: obs.item(),
    })
}

/// Loss parts for one optimizer step. Terms are token sums; `total` is the normalised
/// objective the optimizer saw.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stage: u8,
    pub lambda: f64,
    pub alpha: f64,
    pub total: f64,
    pub nmt_term: f64,
    pub cmlm_term: f64,
    pub kd_kl_term: f64,
    pub kd_nll_term: f64,
    pub observed_nll_term: f64,
    pub nmt_tokens: usize,
    pub cmlm_tokens: usize,
    pub kd_tokens: usize,
    pub observed_tokens: usize,
    /// Batch target token count the sums are divided by.
    pub normalizer: usize,
}

impl LossBreakdown {
    /// The total implied by the parts under this stage's formula.
    pub fn reconstruct(&self) -> f64 {
        let n = self.normalizer as f64;
        match self.stage {
            1 => (self.lambda * self.nmt_term + (1.0 - self.lambda) * self.cmlm_term) / n,
            _ => {
                (self.alpha * self.kd_kl_term
                    + (1.0 - self.alpha) * self.kd_nll_term
                    + self.observed_nll_term)
                    / n
            }
        }
    }
}
