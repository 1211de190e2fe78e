//! Choosing which target words are distilled, and the stage-1 CMLM mask sampler.
//!
//! Positions are 0-based word indices; [EOS] is never a candidate.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Interval edges used by Part-to-All; `[lo, hi)` except the last, which is closed.
pub const PART_TO_ALL_EDGES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("NMT-Wrong needs the NMT argmax for every position")]
    MissingArgmax,
    #[error("{what} has {got} entries for a sentence of {len} words")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        len: usize,
    },
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("mask plan record: {0}")]
    BadRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Confidence,
    Random,
    NmtHigh,
    NmtWrong,
    AllAtOnce,
    PartToAll,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Confidence,
        Strategy::Random,
        Strategy::NmtHigh,
        Strategy::NmtWrong,
        Strategy::AllAtOnce,
        Strategy::PartToAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Confidence => "confidence",
            Strategy::Random => "random",
            Strategy::NmtHigh => "nmt-high",
            Strategy::NmtWrong => "nmt-wrong",
            Strategy::AllAtOnce => "all-at-once",
            Strategy::PartToAll => "part-to-all",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = SelectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SelectionError::UnknownStrategy(s.to_string()))
    }
}

/// Distillation positions for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub strategy: Strategy,
    /// Sorted positions whose distributions are distilled.
    pub positions: Vec<usize>,
    /// Part-to-All only: one sorted subset per interval of [`PART_TO_ALL_EDGES`].
    pub subsets: Vec<Vec<usize>>,
}

impl MaskPlan {
    fn single(strategy: Strategy, mut positions: Vec<usize>) -> Self {
        positions.sort_unstable();
        Self {
            strategy,
            positions,
            subsets: Vec::new(),
        }
    }

    /// Masked sets for each CMLM pass; empty sets are skipped.
    pub fn passes(&self) -> Vec<&[usize]> {
        if self.strategy == Strategy::PartToAll {
            self.subsets
                .iter()
                .filter(|s| !s.is_empty())
                .map(Vec::as_slice)
                .collect()
        } else if self.positions.is_empty() {
            Vec::new()
        } else {
            vec![self.positions.as_slice()]
        }
    }
}

/// Positions with `conf[t] <= eps`.
pub fn select_by_confidence(conf: &[f64], eps: f64) -> MaskPlan {
    let positions = (0..conf.len()).filter(|&t| conf[t] <= eps).collect();
    MaskPlan::single(Strategy::Confidence, positions)
}

/// Index of the Part-to-All interval holding `c`.
pub fn interval_of(c: f64) -> usize {
    let last = PART_TO_ALL_EDGES.len() - 2;
    (0..last)
        .find(|&i| c < PART_TO_ALL_EDGES[i + 1])
        .unwrap_or(last)
}

/// Splits every position into the five confidence intervals.
pub fn plan_part_to_all(conf: &[f64]) -> MaskPlan {
    let mut subsets = vec![Vec::new(); PART_TO_ALL_EDGES.len() - 1];
    for (t, &c) in conf.iter().enumerate() {
        subsets[interval_of(c)].push(t);
    }
    MaskPlan {
        strategy: Strategy::PartToAll,
        positions: (0..conf.len()).collect(),
        subsets,
    }
}

/// Plan for any strategy. `nmt_argmax` is required for NMT-Wrong only; `rng` is consumed by Random only.
pub fn select_variant<R: Rng + ?Sized>(
    strategy: Strategy,
    conf: &[f64],
    nmt_argmax: Option<&[usize]>,
    gold: &[usize],
    eps: f64,
    rng: &mut R,
) -> Result<MaskPlan, SelectionError> {
    let len = conf.len();
    if gold.len() != len {
        return Err(SelectionError::LengthMismatch {
            what: "gold",
            got: gold.len(),
            len,
        });
    }
    Ok(match strategy {
        Strategy::Confidence => select_by_confidence(conf, eps),
        Strategy::Random => {
            let k = conf.iter().filter(|&&c| c <= eps).count();
            MaskPlan::single(Strategy::Random, sample(rng, len, k).into_vec())
        }
        Strategy::NmtHigh => {
            let positions = (0..len).filter(|&t| conf[t] > 1.0 - eps).collect();
            MaskPlan::single(Strategy::NmtHigh, positions)
        }
        Strategy::NmtWrong => {
            let argmax = nmt_argmax.ok_or(SelectionError::MissingArgmax)?;
            if argmax.len() != len {
                return Err(SelectionError::LengthMismatch {
                    what: "argmax",
                    got: argmax.len(),
                    len,
                });
            }
            let positions = (0..len).filter(|&t| argmax[t] != gold[t]).collect();
            MaskPlan::single(Strategy::NmtWrong, positions)
        }
        Strategy::AllAtOnce => MaskPlan::single(Strategy::AllAtOnce, (0..len).collect()),
        Strategy::PartToAll => plan_part_to_all(conf),
    })
}

/// Stage-1 CMLM mask: `n ~ U{1..len}`, then `n` distinct positions uniformly. Sorted.
pub fn sample_cmlm_mask<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<usize> {
    assert!(len >= 1, "cannot mask an empty sentence");
    let n = rng.gen_range(1..=len);
    let mut v = sample(rng, len, n).into_vec();
    v.sort_unstable();
    v
}

/// One line of the mask-plan dump.
///
/// Tab-separated: step, corpus sentence index, strategy, sentence length, the masked
/// subsets (comma-separated positions, subsets joined by `|`), and the number of observed
/// (non-[M]) words in each CMLM input built for the sentence (joined by `|`).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlanRecord {
    pub step: usize,
    pub sentence: usize,
    pub strategy: Strategy,
    pub len: usize,
    pub subsets: Vec<Vec<usize>>,
    pub cmlm_observed: Vec<usize>,
}

impl fmt::Display for MaskPlanRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| v.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",");
        let subsets: Vec<String> = self.subsets.iter().map(|s| join(s)).collect();
        let observed: Vec<String> = self.cmlm_observed.iter().map(|n| n.to_string()).collect();
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.sentence,
            self.strategy,
            self.len,
            subsets.join("|"),
            observed.join("|")
        )
    }
}

impl FromStr for MaskPlanRecord {
    type Err = SelectionError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| SelectionError::BadRecord(format!("{m}: {line:?}"));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
        let list = |s: &str| -> Result<Vec<usize>, SelectionError> {
            if s.is_empty() {
                Ok(Vec::new())
            } else {
                s.split(',').map(num).collect()
            }
        };
        let groups = |s: &str| -> Result<Vec<Vec<usize>>, SelectionError> {
            if s.is_empty() {
                Ok(Vec::new())
            } else {
                s.split('|').map(list).collect()
            }
        };
        Ok(Self {
            step: num(fields[0])?,
            sentence: num(fields[1])?,
            strategy: fields[2].parse()?,
            len: num(fields[3])?,
            subsets: groups(fields[4])?,
            cmlm_observed: if fields[5].is_empty() {
                Vec::new()
            } else {
                fields[5].split('|').map(num).collect::<Result<_, _>>()?
            },
        })
    }
}
