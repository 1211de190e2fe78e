//! Synthetic translation corpora, vocabularies and token-budget batching.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const MASK: &str = "[M]";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("alphabet of size {0} is too small for this task (need at least 2)")]
    AlphabetTooSmall(usize),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sentence {index} needs {tokens} tokens but the batch budget is {budget}")]
    OverBudget {
        index: usize,
        tokens: usize,
        budget: usize,
    },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

/// Token/id bijection with the four reserved symbols at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;
    pub const MASK_ID: usize = 3;
    pub const RESERVED: usize = 4;

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        let reserved = [PAD, BOS, EOS, MASK];
        if tokens.len() < Self::RESERVED || tokens[..Self::RESERVED] != reserved {
            return Err(DataError::InvalidTask(
                "vocab must start with [PAD] [BOS] [EOS] [M]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::InvalidTask(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Every token seen on either side of the corpus, sorted, after the reserved ids.
    pub fn build(corpus: &[SentencePair]) -> Self {
        let mut seen: Vec<&str> = corpus
            .iter()
            .flat_map(|p| p.src.iter().chain(p.tgt.iter()))
            .map(String::as_str)
            .collect();
        seen.sort_unstable();
        seen.dedup();
        let tokens = [PAD, BOS, EOS, MASK]
            .into_iter()
            .chain(seen.into_iter().filter(|t| ![PAD, BOS, EOS, MASK].contains(t)))
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix is always present")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>, DataError> {
        tokens
            .iter()
            .map(|t| self.id(t).ok_or_else(|| DataError::UnknownToken(t.clone())))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("[UNK]").to_string())
            .collect()
    }

    pub fn encode_pairs(&self, corpus: &[SentencePair]) -> Result<Vec<EncodedPair>, DataError> {
        corpus
            .iter()
            .map(|p| {
                Ok(EncodedPair {
                    src: self.encode(&p.src)?,
                    tgt: self.encode(&p.tgt)?,
                })
            })
            .collect()
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    LexiconSwap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of swapping each adjacent pair (lexicon-swap only).
    pub swap_prob: f64,
    /// Probability of replacing a target token by a uniformly drawn symbol.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::LexiconSwap,
            alphabet: 32,
            min_len: 5,
            max_len: 15,
            swap_prob: 0.3,
            noise_rate: 0.0,
            seed: 1,
        }
    }
}

pub fn symbol(i: usize) -> String {
    format!("w{i}")
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.alphabet < 1 {
            return Err(DataError::AlphabetTooSmall(self.alphabet));
        }
        if self.alphabet < 2 && self.kind != TaskKind::Copy {
            return Err(DataError::AlphabetTooSmall(self.alphabet));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(DataError::InvalidTask(format!(
                "length range {}..={} is empty",
                self.min_len, self.max_len
            )));
        }
        for (name, p) in [("swap_prob", self.swap_prob), ("noise_rate", self.noise_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::InvalidTask(format!("{name}={p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// The fixed source-to-target symbol permutation used by lexicon-swap.
    pub fn lexicon(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x1e71_c0de);
        let mut perm: Vec<usize> = (0..self.alphabet).collect();
        perm.shuffle(&mut rng);
        perm
    }
}

/// Deterministic corpus of `size` pairs for `task`.
pub fn generate_corpus(task: &SyntheticTask, size: usize) -> Result<Vec<SentencePair>, DataError> {
    task.validate()?;
    if size == 0 {
        return Err(DataError::EmptyCorpus);
    }
    let lexicon = task.lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut corpus = Vec::with_capacity(size);
    for _ in 0..size {
        let len = rng.gen_range(task.min_len..=task.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..task.alphabet)).collect();
        let mut tgt: Vec<usize> = match task.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::LexiconSwap => {
                let mut t: Vec<usize> = src.iter().map(|&s| lexicon[s]).collect();
                // pairs (0,1), (2,3), ... each swapped independently
                for pair in t.chunks_mut(2) {
                    if pair.len() == 2 && rng.gen_bool(task.swap_prob) {
                        pair.swap(0, 1);
                    }
                }
                t
            }
        };
        if task.noise_rate > 0.0 {
            for tok in tgt.iter_mut() {
                if rng.gen_bool(task.noise_rate) {
                    *tok = rng.gen_range(0..task.alphabet);
                }
            }
        }
        corpus.push(SentencePair {
            src: src.into_iter().map(symbol).collect(),
            tgt: tgt.into_iter().map(symbol).collect(),
        });
    }
    Ok(corpus)
}

/// One pair per line: source tokens, a tab, target tokens; tokens space-separated.
pub fn write_corpus(path: &Path, corpus: &[SentencePair]) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for p in corpus {
        writeln!(f, "{}\t{}", p.src.join(" "), p.tgt.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<SentencePair>, DataError> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (src, tgt) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: "missing tab separator".into(),
        })?;
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        let pair = SentencePair {
            src: split(src),
            tgt: split(tgt),
        };
        if pair.src.is_empty() || pair.tgt.is_empty() {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "empty side".into(),
            });
        }
        out.push(pair);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl EncodedPair {
    /// Tokens this pair occupies in a padded batch.
    pub fn footprint(&self) -> usize {
        self.src.len().max(self.tgt.len())
    }
}

/// Right-padded id matrix `[rows, width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedSeqs {
    pub ids: Vec<usize>,
    pub rows: usize,
    pub width: usize,
    pub lens: Vec<usize>,
}

impl PaddedSeqs {
    pub fn from_seqs<'a>(seqs: impl IntoIterator<Item = &'a [usize]>, pad: usize) -> Self {
        let seqs: Vec<&[usize]> = seqs.into_iter().collect();
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        for s in &seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(pad).take(width - s.len()));
        }
        Self {
            ids,
            rows: seqs.len(),
            width,
            lens: seqs.iter().map(|s| s.len()).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.width..r * self.width + self.lens[r]]
    }

    pub fn is_pad(&self, r: usize, t: usize) -> bool {
        t >= self.lens[r]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Corpus indices of the pairs in this batch.
    pub indices: Vec<usize>,
    pub src: PaddedSeqs,
    pub tgt: PaddedSeqs,
}

impl Batch {
    pub fn from_pairs(pairs: &[EncodedPair], indices: Vec<usize>) -> Self {
        let src = PaddedSeqs::from_seqs(indices.iter().map(|&i| pairs[i].src.as_slice()), Vocab::PAD_ID);
        let tgt = PaddedSeqs::from_seqs(indices.iter().map(|&i| pairs[i].tgt.as_slice()), Vocab::PAD_ID);
        Self { indices, src, tgt }
    }

    /// Sentences times the longest side of any member.
    pub fn padded_tokens(&self) -> usize {
        self.indices.len() * self.src.width.max(self.tgt.width)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    pub token_budget: usize,
}

/// Groups similar-length pairs into batches whose padded size fits `token_budget`,
/// then shuffles batch order with `seed`.
pub fn make_batches(pairs: &[EncodedPair], token_budget: usize, seed: u64) -> Result<BatchPlan, DataError> {
    if pairs.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    if let Some((index, p)) = pairs.iter().enumerate().find(|(_, p)| p.footprint() > token_budget) {
        return Err(DataError::OverBudget {
            index,
            tokens: p.footprint(),
            budget: token_budget,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    // stable: equal lengths keep their shuffled order
    order.sort_by_key(|&i| pairs[i].footprint());

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut width = 0;
    for i in order {
        let w = width.max(pairs[i].footprint());
        if !current.is_empty() && (current.len() + 1) * w > token_budget {
            groups.push(std::mem::take(&mut current));
            width = 0;
        }
        width = width.max(pairs[i].footprint());
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);
    Ok(BatchPlan {
        batches: groups.into_iter().map(|g| Batch::from_pairs(pairs, g)).collect(),
        token_budget,
    })
}
