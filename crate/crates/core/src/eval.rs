//! Decoding, BLEU, paired bootstrap and the teacher-forced confidence histogram.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batches, EncodedPair, PaddedSeqs, Vocab};
use crate::model::{Binder, Dropout, EncoderRole, ModelBundle, ModelError};
use crate::tensor::Graph;
use crate::trainer::gold_targets;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{what}: {a} vs {b} entries")]
    Misaligned { what: &'static str, a: usize, b: usize },
    #[error("paired bootstrap needs at least 1000 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("interval edges must rise strictly from 0 to 1: {0:?}")]
    BadEdges(Vec<f64>),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Tokens the decoder may never emit: the [M] logit is masked only here, at inference.
const BANNED: [usize; 3] = [Vocab::PAD_ID, Vocab::BOS_ID, Vocab::MASK_ID];

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Words, without [EOS].
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, [EOS] included when finished.
    pub log_prob: f64,
    /// `log_prob` divided by the number of scored tokens.
    pub score: f64,
    pub finished: bool,
}

/// Log-softmax of the last-position logits over the decodable tokens.
fn next_token_log_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(v, _)| !BANNED.contains(v))
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits
        .iter()
        .enumerate()
        .filter(|(v, _)| !BANNED.contains(v))
        .map(|(_, &l)| (l - max).exp())
        .sum();
    let lz = max + z.ln();
    logits
        .iter()
        .enumerate()
        .map(|(v, &l)| if BANNED.contains(&v) { f64::NEG_INFINITY } else { l - lz })
        .collect()
}

/// Next-token log-probabilities for each prefix (all the same length) given one source.
fn step_log_probs<'g>(
    bundle: &ModelBundle,
    b: &Binder<'g, '_>,
    enc: &crate::model::Encoded<'g>,
    prefixes: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let inputs: Vec<Vec<usize>> = prefixes
        .iter()
        .map(|p| std::iter::once(Vocab::BOS_ID).chain(p.iter().copied()).collect())
        .collect();
    let dec_in = PaddedSeqs::from_seqs(inputs.iter().map(Vec::as_slice), Vocab::PAD_ID);
    let rows = enc.select(&vec![0; prefixes.len()])?;
    let logits = bundle.nmt_logits(b, &rows, &dec_in, &mut Dropout::eval())?.value();
    let width = dec_in.width;
    Ok((0..prefixes.len())
        .map(|r| next_token_log_probs(logits.row(r * width + width - 1)))
        .collect())
}

/// Beam search with length-normalised scores. `max_len` bounds generated tokens, [EOS]
/// included. Stops once `beam_size` hypotheses have finished; if none finishes, the best
/// unfinished one is returned with `finished = false`.
pub fn beam_search(bundle: &ModelBundle, src: &[usize], beam_size: usize, max_len: usize) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(EvalError::ZeroBeam);
    }
    let g = Graph::no_grad();
    let b = Binder::frozen(&g, bundle);
    let src = PaddedSeqs::from_seqs([src], Vocab::PAD_ID);
    let enc = bundle.encode(&b, EncoderRole::Nmt, &src, &mut Dropout::eval())?;
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<usize>> = beams.iter().map(|(p, _)| p.clone()).collect();
        let lps = step_log_probs(bundle, &b, &enc, &prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, lp) in lps.iter().enumerate() {
            for (v, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    cands.push((beams[i].1 + l, i, v));
                }
            }
        }
        // Ties resolve towards earlier beams and lower ids, matching greedy argmax.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam_size);
        let mut next = Vec::new();
        for (lp, i, v) in cands {
            let tokens = beams[i].0.clone();
            if v == Vocab::EOS_ID {
                let n = tokens.len() + 1;
                finished.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    score: lp / n as f64,
                    finished: true,
                });
            } else {
                let mut t = tokens;
                t.push(v);
                next.push((t, lp));
            }
        }
        beams = next;
        if finished.len() >= beam_size || beams.is_empty() {
            break;
        }
    }
    let best = |hs: Vec<Hypothesis>| {
        hs.into_iter()
            .reduce(|a, b| if b.score > a.score { b } else { a })
    };
    if let Some(h) = best(finished) {
        return Ok(h);
    }
    let unfinished = beams
        .into_iter()
        .map(|(tokens, lp)| {
            let n = tokens.len().max(1);
            Hypothesis {
                tokens,
                log_prob: lp,
                score: lp / n as f64,
                finished: false,
            }
        })
        .collect();
    Ok(best(unfinished).expect("beam never empties without finishing"))
}

/// Argmax decoding under the same support restriction as beam search.
pub fn greedy_decode(bundle: &ModelBundle, src: &[usize], max_len: usize) -> Result<Hypothesis> {
    let g = Graph::no_grad();
    let b = Binder::frozen(&g, bundle);
    let src = PaddedSeqs::from_seqs([src], Vocab::PAD_ID);
    let enc = bundle.encode(&b, EncoderRole::Nmt, &src, &mut Dropout::eval())?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = step_log_probs(bundle, &b, &enc, std::slice::from_ref(&tokens))?.remove(0);
        let v = (0..lp.len()).fold(0, |best, v| if lp[v] > lp[best] { v } else { best });
        log_prob += lp[v];
        if v == Vocab::EOS_ID {
            let n = tokens.len() + 1;
            return Ok(Hypothesis {
                tokens,
                log_prob,
                score: log_prob / n as f64,
                finished: true,
            });
        }
        tokens.push(v);
    }
    let n = tokens.len().max(1);
    Ok(Hypothesis {
        tokens,
        log_prob,
        score: log_prob / n as f64,
        finished: false,
    })
}

/// Decoding budget for a source: its length plus `extra`, capped by the model's limit.
pub fn decode_limit(bundle: &ModelBundle, src_len: usize, extra: usize) -> usize {
    (src_len + extra).min(bundle.config().max_len) + 1
}

/// Beam-decodes every source.
pub fn translate(bundle: &ModelBundle, sources: &[Vec<usize>], beam_size: usize, extra: usize) -> Result<Vec<Hypothesis>> {
    sources
        .iter()
        .map(|s| beam_search(bundle, s, beam_size, decode_limit(bundle, s.len(), extra)))
        .collect()
}

/// Clipped n-gram matches and totals for n = 1..4, plus lengths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..4 {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

fn ngram_counts<T: Hash + Eq>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn bleu_stats<T: Hash + Eq>(hyp: &[T], reference: &[T]) -> BleuStats {
    let mut s = BleuStats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..Default::default()
    };
    for n in 1..=4 {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        s.matches[n - 1] = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
    }
    s
}

fn brevity_penalty(s: &BleuStats) -> f64 {
    if s.hyp_len >= s.ref_len {
        1.0
    } else {
        (1.0 - s.ref_len as f64 / s.hyp_len as f64).exp()
    }
}

/// Unsmoothed BLEU-4 in [0, 100]; any zero precision gives 0.
pub fn bleu_from_stats(s: &BleuStats) -> f64 {
    if s.hyp_len == 0 || s.matches.iter().any(|&m| m == 0) {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|n| (s.matches[n] as f64 / s.totals[n] as f64).ln())
        .sum::<f64>()
        / 4.0;
    100.0 * brevity_penalty(s) * log_p.exp()
}

/// BLEU-4 with zero counts replaced by 1e-9, for per-sentence diagnostics.
pub fn smoothed_bleu_from_stats(s: &BleuStats) -> f64 {
    if s.hyp_len == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|n| {
            let m = if s.matches[n] == 0 { 1e-9 } else { s.matches[n] as f64 };
            let t = if s.totals[n] == 0 { 1.0 } else { s.totals[n] as f64 };
            (m / t).ln()
        })
        .sum::<f64>()
        / 4.0;
    100.0 * brevity_penalty(s) * log_p.exp()
}

fn corpus_stats<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<Vec<BleuStats>> {
    if hyps.len() != refs.len() {
        return Err(EvalError::Misaligned {
            what: "hypotheses vs references",
            a: hyps.len(),
            b: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(hyps.iter().zip(refs).map(|(h, r)| bleu_stats(h, r)).collect())
}

/// Corpus-level BLEU-4.
pub fn corpus_bleu<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    let mut total = BleuStats::default();
    for s in corpus_stats(hyps, refs)? {
        total += s;
    }
    Ok(bleu_from_stats(&total))
}

pub fn sentence_bleu<T: Hash + Eq>(hyp: &[T], reference: &[T]) -> f64 {
    smoothed_bleu_from_stats(&bleu_stats(hyp, reference))
}

/// Fraction of paired resamples in which system B's corpus BLEU is at least system A's:
/// the p-value for "A is better than B".
pub fn paired_bootstrap<T: Hash + Eq>(
    hyps_a: &[Vec<T>],
    hyps_b: &[Vec<T>],
    refs: &[Vec<T>],
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    if hyps_a.len() != hyps_b.len() {
        return Err(EvalError::Misaligned {
            what: "system A vs system B",
            a: hyps_a.len(),
            b: hyps_b.len(),
        });
    }
    if resamples < 1000 {
        return Err(EvalError::TooFewResamples(resamples));
    }
    let sa = corpus_stats(hyps_a, refs)?;
    let sb = corpus_stats(hyps_b, refs)?;
    let n = sa.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b_wins = 0;
    for _ in 0..resamples {
        let (mut ta, mut tb) = (BleuStats::default(), BleuStats::default());
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            ta += sa[i];
            tb += sb[i];
        }
        if bleu_from_stats(&tb) >= bleu_from_stats(&ta) {
            b_wins += 1;
        }
    }
    Ok(b_wins as f64 / resamples as f64)
}

/// Interval edges of the reference confidence table.
pub const TABLE_EDGES: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub percentages: Vec<f64>,
    pub total: usize,
}

fn check_edges(edges: &[f64]) -> Result<()> {
    let ok = edges.len() >= 2
        && edges[0] == 0.0
        && *edges.last().unwrap() == 1.0
        && edges.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(EvalError::BadEdges(edges.to_vec()))
    }
}

/// Bin of `p`: `[lo, hi)` for every interval but the last, which is `[lo, 1]`.
pub fn bin_of(p: f64, edges: &[f64]) -> usize {
    let last = edges.len() - 2;
    (0..last).find(|&i| p < edges[i + 1]).unwrap_or(last)
}

impl ConfidenceReport {
    pub fn from_values(values: &[f64], edges: &[f64]) -> Result<Self> {
        check_edges(edges)?;
        if values.is_empty() {
            return Err(EvalError::EmptyCorpus);
        }
        let mut counts = vec![0; edges.len() - 1];
        for &p in values {
            counts[bin_of(p, edges)] += 1;
        }
        let total = values.len();
        let percentages = counts.iter().map(|&c| 100.0 * c as f64 / total as f64).collect();
        Ok(Self {
            edges: edges.to_vec(),
            counts,
            percentages,
            total,
        })
    }

    pub fn labels(&self) -> Vec<String> {
        let n = self.edges.len() - 1;
        (0..n)
            .map(|i| {
                let close = if i + 1 == n { ']' } else { ')' };
                format!("[{}, {}{close}", self.edges[i], self.edges[i + 1])
            })
            .collect()
    }

    /// Summed percentage of intervals lying entirely below `threshold`.
    pub fn mass_below(&self, threshold: f64) -> f64 {
        (0..self.counts.len())
            .filter(|&i| self.edges[i + 1] <= threshold)
            .map(|i| self.percentages[i])
            .sum()
    }

    /// Plain-text table: one row of percentages under interval headers.
    pub fn table(&self, name: &str) -> String {
        let labels = self.labels();
        let mut s = format!("{:<14}", "model");
        for l in &labels {
            let _ = write!(s, "{l:>12}");
        }
        let _ = write!(s, "\n{name:<14}");
        for p in &self.percentages {
            let _ = write!(s, "{p:>12.2}");
        }
        s.push('\n');
        s
    }

    /// Before/after table with a Δ row.
    pub fn delta_table(&self, before_name: &str, after: &ConfidenceReport, after_name: &str) -> String {
        let mut s = self.table(before_name);
        let _ = write!(s, "{after_name:<14}");
        for p in &after.percentages {
            let _ = write!(s, "{p:>12.2}");
        }
        let _ = write!(s, "\n{:<14}", "delta");
        for (a, b) in self.percentages.iter().zip(&after.percentages) {
            let _ = write!(s, "{:>+12.2}", b - a);
        }
        s.push('\n');
        s
    }

    /// One JSON object per interval.
    pub fn json_lines(&self, name: &str) -> String {
        let mut s = String::new();
        for (i, label) in self.labels().into_iter().enumerate() {
            let rec = serde_json::json!({
                "model": name,
                "interval": label,
                "lo": self.edges[i],
                "hi": self.edges[i + 1],
                "count": self.counts[i],
                "percent": self.percentages[i],
                "total": self.total,
            });
            s.push_str(&rec.to_string());
            s.push('\n');
        }
        s
    }

    /// Bar chart of the percentages.
    pub fn svg(&self, title: &str) -> String {
        let (w, h, pad) = (640.0, 360.0, 48.0);
        let n = self.percentages.len() as f64;
        let bar = (w - 2.0 * pad) / n;
        let top = self.percentages.iter().cloned().fold(1.0, f64::max);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n\
             <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            w / 2.0,
            xml_escape(title),
            h - pad,
            w - pad,
            h - pad
        );
        for (i, (p, label)) in self.percentages.iter().zip(self.labels()).enumerate() {
            let bh = (h - 2.0 * pad) * p / top;
            let x = pad + i as f64 * bar;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"#4a7ab5\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{p:.2}%</text>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
                x + 4.0,
                h - pad - bh,
                bar - 8.0,
                x + bar / 2.0,
                h - pad - bh - 4.0,
                x + bar / 2.0,
                h - pad + 16.0,
                xml_escape(&label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Teacher-forced gold-token probabilities of the NMT model in evaluation mode, for every
/// target token including [EOS], in corpus order.
pub fn gold_confidences(bundle: &ModelBundle, pairs: &[EncodedPair], budget: usize) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let plan = make_batches(pairs, budget, 0)?;
    let mut per_pair: Vec<Vec<f64>> = vec![Vec::new(); pairs.len()];
    for batch in &plan.batches {
        let g = Graph::no_grad();
        let b = Binder::frozen(&g, bundle);
        let enc = bundle.encode(&b, EncoderRole::Nmt, &batch.src, &mut Dropout::eval())?;
        let out = bundle.nmt_forward(&b, &enc, &batch.tgt, &mut Dropout::eval())?;
        let probs = out.probs.value();
        let width = out.teacher.width();
        for t in gold_targets(&out.teacher) {
            per_pair[batch.indices[t.row / width]].push(probs.row(t.row)[t.gold]);
        }
    }
    Ok(per_pair.concat())
}

pub fn confidence_histogram(
    bundle: &ModelBundle,
    pairs: &[EncodedPair],
    edges: &[f64],
    budget: usize,
) -> Result<ConfidenceReport> {
    check_edges(edges)?;
    ConfidenceReport::from_values(&gold_confidences(bundle, pairs, budget)?, edges)
}
