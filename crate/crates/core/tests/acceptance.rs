//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use seqkd::cli::{gen_data, train_stage1, train_stage2, ExperimentConfig, RunDir};
use seqkd::data::{EncodedPair, PaddedSeqs, Vocab};
use seqkd::eval::{beam_search, decode_limit, greedy_decode, ConfidenceReport};
use seqkd::experiment::{run_seed, SeedResult};
use seqkd::model::{Binder, Dropout, EncoderRole, MaskedBatch, ModelBundle, ModelConfig, ParamGroup};
use seqkd::objectives::{cmlm_loss, joint_loss, kd_loss, nll_loss, stage2_loss, Target};
use seqkd::selection::{
    plan_part_to_all, sample_cmlm_mask, select_by_confidence, select_variant, MaskPlan, MaskPlanRecord, Strategy,
};
use seqkd::tensor::{check_gradients, Array, AttentionMask, GradCheck, Graph, Tensor};
use seqkd::trainer::{
    alpha_at, gold_targets, lr_at, teacher_distributions, Checkpoint, RunOutputs, TrainConfig, Trainer,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn desk_config() -> Result<ExperimentConfig> {
    let path = manifest_dir().join("../../configs/desk_scale.toml");
    ExperimentConfig::resolve(Some(&path), &[], &[])
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn readout<'g>(t: Tensor<'g>, w: &[f64]) -> seqkd::tensor::Result<Tensor<'g>> {
    let weights = (0..t.len()).map(|i| w[i % w.len()] + 0.05 * i as f64).collect();
    t.weighted_sum(weights)
}

// ---------------------------------------------------------------- criterion 1

fn primitive_error(which: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let w: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = w.as_slice();
    let opts = GradCheck::with_step(1e-5);
    let mut pts = |shapes: &[&[usize]]| -> Vec<Array> { shapes.iter().map(|s| random_array(&mut rng, s)).collect() };
    let err = match which {
        0 => check_gradients(|_, l| readout(l[0].matmul(l[1])?, w), &pts(&[&[3, 5], &[5, 2]]), &opts),
        1 => check_gradients(|_, l| readout(l[0].bmm(l[1], false, 0.7)?, w), &pts(&[&[2, 3, 4], &[2, 4, 3]]), &opts),
        2 => check_gradients(|_, l| readout(l[0].bmm(l[1], true, 0.7)?, w), &pts(&[&[2, 3, 4], &[2, 5, 4]]), &opts),
        3 => check_gradients(|_, l| readout(l[0].add(l[1])?, w), &pts(&[&[3, 3], &[3, 3]]), &opts),
        4 => check_gradients(|_, l| readout(l[0].mul(l[1])?, w), &pts(&[&[3, 3], &[3, 3]]), &opts),
        5 => check_gradients(|_, l| readout(l[0].sub(l[1])?, w), &pts(&[&[2, 4], &[2, 4]]), &opts),
        6 => check_gradients(|_, l| readout(l[0].add_row(l[1])?, w), &pts(&[&[3, 4], &[4]]), &opts),
        7 => check_gradients(|_, l| readout(l[0].scale(-1.7)?, w), &pts(&[&[5]]), &opts),
        8 => {
            // Stay clear of the kink at zero.
            let mut p = pts(&[&[4, 4]]);
            for v in p[0].data_mut() {
                *v += 0.2 * v.signum();
            }
            check_gradients(|_, l| readout(l[0].relu()?, w), &p, &opts)
        }
        9 => check_gradients(|_, l| readout(l[0].softmax()?, w), &pts(&[&[3, 6]]), &opts),
        10 => {
            let mask = AttentionMask::padding(&[3, 2], 4, 3, false);
            check_gradients(|_, l| readout(l[0].masked_softmax(&mask)?, w), &pts(&[&[4, 4, 3]]), &opts)
        }
        11 => check_gradients(
            |_, l| readout(l[0].layer_norm(l[1], l[2])?, w),
            &pts(&[&[3, 5], &[5], &[5]]),
            &opts,
        ),
        12 => check_gradients(|_, l| readout(l[0].embedding(&[1, 3, 1, 0])?, w), &pts(&[&[4, 3]]), &opts),
        13 => check_gradients(
            |_, l| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                readout(l[0].dropout(0.3, Some(&mut r))?, w)
            },
            &pts(&[&[4, 5]]),
            &opts,
        ),
        14 => check_gradients(|_, l| readout(l[0].reshape(&[2, 6])?, w), &pts(&[&[3, 4]]), &opts),
        15 => check_gradients(|_, l| readout(l[0].split_heads(2, 3, 2)?, w), &pts(&[&[6, 4]]), &opts),
        16 => check_gradients(|_, l| readout(l[0].merge_heads(2, 3, 2)?, w), &pts(&[&[4, 3, 2]]), &opts),
        17 => check_gradients(|_, l| readout(l[0].gather_rows(&[2, 0, 2])?, w), &pts(&[&[3, 4]]), &opts),
        18 => {
            let p = vec![Array::new(vec![6], (0..6).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap()];
            check_gradients(|_, l| readout(l[0].log(1e-12)?, w), &p, &opts)
        }
        19 => check_gradients(|_, l| l[0].mul(l[0])?.sum(), &pts(&[&[2, 3]]), &opts),
        _ => unreachable!(),
    };
    Ok(err?)
}

struct Fixture {
    src: PaddedSeqs,
    tgt: PaddedSeqs,
    masked: MaskedBatch,
    /// Distilled (row, position) pairs and their teacher rows.
    kd: Vec<((usize, usize), Vec<f64>)>,
}

fn stage1_loss<'g>(b: &Binder<'g, '_>, m: &ModelBundle, fx: &Fixture) -> Result<Tensor<'g>> {
    let enc = m.encode(b, EncoderRole::Shared, &fx.src, &mut Dropout::eval())?;
    let nmt = m.nmt_forward(b, &enc, &fx.tgt, &mut Dropout::eval())?;
    let targets = gold_targets(&nmt.teacher);
    let n = targets.len() as f64;
    let l_nmt = nll_loss(nmt.probs, &targets, 0.1)?;
    let cm = m.cmlm_forward(b, &enc, &fx.masked, &mut Dropout::eval())?;
    let ct: Vec<Target> = cm
        .positions
        .iter()
        .enumerate()
        .map(|(i, &(r, t))| Target::new(i, fx.masked.gold_at(r, t)))
        .collect();
    let l_cmlm = cmlm_loss(cm.probs, &ct, 0.1)?;
    Ok(joint_loss(l_nmt, l_cmlm, 0.7)?.scale(1.0 / n)?)
}

fn stage2_objective<'g>(b: &Binder<'g, '_>, m: &ModelBundle, fx: &Fixture) -> Result<Tensor<'g>> {
    let enc = m.encode(b, EncoderRole::Nmt, &fx.src, &mut Dropout::eval())?;
    let nmt = m.nmt_forward(b, &enc, &fx.tgt, &mut Dropout::eval())?;
    let all = gold_targets(&nmt.teacher);
    let n = all.len() as f64;
    let mut kd_targets = Vec::new();
    let mut q = Vec::new();
    let mut rows = Vec::new();
    for ((r, t), qt) in &fx.kd {
        let row = nmt.teacher.index(*r, *t);
        kd_targets.push(Target::new(row, fx.tgt.row(*r)[*t]));
        q.extend_from_slice(qt);
        rows.push(row);
    }
    let observed: Vec<Target> = all.into_iter().filter(|t| !rows.contains(&t.row)).collect();
    let kd = kd_loss(nmt.probs, &kd_targets, &q, 0.6, 0.0)?;
    Ok(stage2_loss(kd.loss, &rows, nmt.probs, &observed, 0.1)?.loss.scale(1.0 / n)?)
}

type LossFn = for<'g, 'm> fn(&Binder<'g, 'm>, &ModelBundle, &Fixture) -> Result<Tensor<'g>>;

/// Backprop vs central differences over a sample of coordinates of every trainable tensor.
fn model_gradient_error(bundle: &mut ModelBundle, groups: &[ParamGroup], f: LossFn, fx: &Fixture) -> Result<f64> {
    let grads = {
        let g = Graph::new();
        let b = Binder::new(&g, bundle, groups);
        let loss = f(&b, bundle, fx)?;
        g.backprop(loss)?
    };
    let eval = |m: &ModelBundle| -> Result<f64> {
        let g = Graph::no_grad();
        let b = Binder::frozen(&g, m);
        Ok(f(&b, m, fx)?.item())
    };
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ids: Vec<_> = groups.iter().flat_map(|g| bundle.store().ids_in(*g)).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let len = bundle.store().get(id).value.len();
        for _ in 0..3 {
            let c = rng.gen_range(0..len);
            let analytic = grads.get(id).map_or(0.0, |a| a.data()[c]);
            let orig = bundle.store().get(id).value.data()[c];
            bundle.store_mut().value_mut(id).data_mut()[c] = orig + h;
            let plus = eval(bundle)?;
            bundle.store_mut().value_mut(id).data_mut()[c] = orig - h;
            let minus = eval(bundle)?;
            bundle.store_mut().value_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            // Key biases get an exact zero gradient (softmax shift invariance); the
            // difference quotient there is rounding noise around 1e-11.
            if analytic.abs().max(numeric.abs()) < 1e-9 {
                continue;
            }
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
        }
    }
    Ok(worst)
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        encoder_layers: 2,
        decoder_layers: 2,
        d_model: 8,
        d_ffn: 16,
        n_heads: 2,
        vocab_src: 10,
        vocab_tgt: 10,
        dropout: 0.1,
        max_len: 12,
    }
}

fn criterion_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let mut prim = 0.0f64;
    for which in 0..20 {
        for seed in 0..3 {
            prim = prim.max(primitive_error(which, seed)?);
        }
    }
    let src = PaddedSeqs::from_seqs([&[4usize, 5, 6, 7][..], &[8, 9, 4][..]], Vocab::PAD_ID);
    let tgt = PaddedSeqs::from_seqs([&[5usize, 4, 7, 6][..], &[9, 8, 4][..]], Vocab::PAD_ID);
    let masked = MaskedBatch::new(&tgt, vec![vec![1, 3], vec![0]])?;
    let mut bundle = ModelBundle::new(toy_model_config(), 3, false)?;
    let mut fx = Fixture {
        src,
        tgt,
        masked,
        kd: Vec::new(),
    };
    let all = bundle.groups();
    let full1 = model_gradient_error(&mut bundle, &all, stage1_loss, &fx)?;

    bundle.separate_encoder()?;
    let plans = vec![
        MaskPlan {
            strategy: Strategy::Confidence,
            positions: vec![0, 2],
            subsets: vec![],
        },
        MaskPlan {
            strategy: Strategy::Confidence,
            positions: vec![1],
            subsets: vec![],
        },
    ];
    let teacher = teacher_distributions(&bundle, &fx.src, &fx.tgt, &plans)?;
    fx.kd = [(0, 0), (0, 2), (1, 1)].iter().map(|k| (*k, teacher.q[k].clone())).collect();
    let full2 = model_gradient_error(
        &mut bundle,
        &[ParamGroup::NmtEncoder, ParamGroup::NmtDecoder],
        stage2_objective,
        &fx,
    )?;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        prim < 1e-4 && full1 < 1e-2 && full2 < 1e-2 && secs < 120.0,
        format!(
            "primitives max rel err {prim:.2e} (< 1e-4); joint loss {full1:.2e}, distillation loss {full2:.2e} (< 1e-2); {secs:.1}s (< 120s)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn random_probs(rng: &mut ChaCha8Rng, rows: usize, v: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * v);
    for _ in 0..rows {
        let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        out.extend(logits.iter().map(|l| l.exp() / z));
    }
    out
}

fn alpha_zero_gap(rng: &mut ChaCha8Rng, smoothing: f64) -> Result<f64> {
    let v = rng.gen_range(6..14);
    let rows = rng.gen_range(1..12);
    let student = random_probs(rng, rows, v);
    let mut targets = Vec::new();
    for r in 0..rows {
        if rng.gen_bool(0.85) {
            targets.push(Target::new(r, rng.gen_range(Vocab::RESERVED..v)));
        }
    }
    let (kd, observed): (Vec<Target>, Vec<Target>) = targets.iter().copied().partition(|_| rng.gen_bool(0.4));
    let q = random_probs(rng, kd.len(), v);
    let kd_rows: Vec<usize> = kd.iter().map(|t| t.row).collect();

    let g = Graph::no_grad();
    let p = g.constant_from(vec![rows, v], student)?;
    let reference = nll_loss(p, &targets, smoothing)?.item();
    let k = kd_loss(p, &kd, &q, 0.0, smoothing)?;
    let combined = stage2_loss(k.loss, &kd_rows, p, &observed, smoothing)?.loss.item();
    Ok((combined - reference).abs())
}

fn criterion_reductions() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut gap = 0.0f64;
    for i in 0..1000 {
        gap = gap.max(alpha_zero_gap(&mut rng, if i % 2 == 0 { 0.0 } else { 0.1 })?);
    }

    let cfg = desk_config()?;
    let dir = tempfile::tempdir()?;
    let mut small = cfg.clone();
    small.data.train_size = 300;
    small.data.valid_size = 20;
    small.data.test_size = 20;
    small.data.dir = dir.path().join("data").to_string_lossy().into_owned();
    gen_data(&small)?;
    let corpus = seqkd::cli::Corpus::load(Path::new(&small.data.dir))?;
    let model = ModelConfig {
        vocab_src: corpus.vocab.len(),
        vocab_tgt: corpus.vocab.len(),
        d_model: 32,
        d_ffn: 64,
        ..cfg.model.clone()
    };
    let run = |always_run_cmlm: bool| -> Result<(ModelBundle, Vec<String>)> {
        let train = TrainConfig {
            lambda: 1.0,
            always_run_cmlm,
            stage1_steps: 40,
            ..cfg.train.clone()
        };
        let mut t = Trainer::stage1(model.clone(), train)?;
        let mut out = RunOutputs::default();
        t.run(&corpus.train, &[], &mut out, None)?;
        let losses = out
            .metrics
            .lines
            .iter()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                format!("{} {} {} {}", v["step"], v["total"], v["nmt_term"], v["grad_norm"])
            })
            .collect();
        Ok((t.into_checkpoint().bundle, losses))
    };
    let (forced, forced_log) = run(true)?;
    let (plain, plain_log) = run(false)?;
    let mut same_params = true;
    for e in plain.store().entries() {
        if e.group != ParamGroup::CmlmDecoder {
            let other = forced.store().find(&e.name).context("missing parameter")?;
            same_params &= forced.store().get(other).value == e.value;
        }
    }
    let same_log = forced_log == plain_log && !plain_log.is_empty();
    outcome(
        gap < 1e-9 && same_params && same_log,
        format!(
            "alpha=0 distillation vs NLL: max gap {gap:.1e} over 1000 batches (< 1e-9); lambda=1 with CMLM branch vs plain: parameters identical {same_params}, 40-step logs identical {same_log}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn random_confidences(rng: &mut ChaCha8Rng, eps: f64) -> Vec<f64> {
    let len = rng.gen_range(1..=20);
    let special = [0.0, 1.0, eps, 1.0 - eps, 0.2, 0.4, 0.6, 0.8];
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.3) {
                special[rng.gen_range(0..special.len())]
            } else {
                rng.gen_range(0.0..=1.0)
            }
        })
        .collect()
}

fn oracle_part_to_all(c: f64) -> usize {
    if c < 0.2 {
        0
    } else if c < 0.4 {
        1
    } else if c < 0.6 {
        2
    } else if c < 0.8 {
        3
    } else {
        4
    }
}

fn criterion_selection() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut mismatches = BTreeMap::<&str, usize>::new();
    let mut bump = |k: &'static str, bad: bool| *mismatches.entry(k).or_insert(0) += bad as usize;
    let mut boundary_hits = 0;
    for _ in 0..10_000 {
        let eps = [0.2, 0.1, 0.35][rng.gen_range(0..3)];
        let conf = random_confidences(&mut rng, eps);
        let len = conf.len();
        let gold: Vec<usize> = (0..len).map(|_| rng.gen_range(4..9)).collect();
        let argmax: Vec<usize> = gold.iter().map(|&g| if rng.gen_bool(0.3) { g + 1 } else { g }).collect();

        let mut low = Vec::new();
        let mut high = Vec::new();
        let mut wrong = Vec::new();
        for t in 0..len {
            if conf[t] <= eps {
                low.push(t);
            }
            if conf[t] == eps {
                boundary_hits += 1;
            }
            if conf[t] > 1.0 - eps {
                high.push(t);
            }
            if argmax[t] != gold[t] {
                wrong.push(t);
            }
        }
        let all: Vec<usize> = (0..len).collect();
        let mut sel = |s| select_variant(s, &conf, Some(&argmax), &gold, eps, &mut rng).unwrap();
        bump("confidence", select_by_confidence(&conf, eps).positions != low);
        bump("confidence (variant)", sel(Strategy::Confidence).positions != low);
        bump("nmt-high", sel(Strategy::NmtHigh).positions != high);
        bump("nmt-wrong", sel(Strategy::NmtWrong).positions != wrong);
        bump("all-at-once", sel(Strategy::AllAtOnce).positions != all);
        let r = sel(Strategy::Random).positions;
        let distinct: BTreeSet<usize> = r.iter().copied().collect();
        bump(
            "random",
            r.len() != low.len() || distinct.len() != r.len() || r.iter().any(|&t| t >= len),
        );
        let mut subsets = vec![Vec::new(); 5];
        for (t, &c) in conf.iter().enumerate() {
            subsets[oracle_part_to_all(c)].push(t);
        }
        let p = plan_part_to_all(&conf);
        bump("part-to-all", p.subsets != subsets || p.positions != all);
    }
    // Random: every position equally likely to be drawn.
    let conf = [0.1, 0.9, 0.15, 0.5, 0.05, 0.7, 0.3, 0.2];
    let gold = [4; 8];
    let mut counts = [0.0f64; 8];
    let draws = 20_000;
    for _ in 0..draws {
        for t in select_variant(Strategy::Random, &conf, None, &gold, 0.2, &mut rng)?.positions {
            counts[t] += 1.0;
        }
    }
    let expected = draws as f64 * 4.0 / 8.0;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p_random = 1.0 - ChiSquared::new(7.0)?.cdf(chi2);
    let bad: usize = mismatches.values().sum();
    outcome(
        bad == 0 && boundary_hits > 1000 && p_random > 0.01,
        format!(
            "10k vectors, mismatches {mismatches:?}, {boundary_hits} exact-threshold entries; random inclusion uniformity p = {p_random:.3}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn criterion_architecture() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut causal_ok = 0;
    let mut bidir_ok = 0;
    for i in 0..100 {
        let cfg = ModelConfig {
            encoder_layers: rng.gen_range(1..=2),
            decoder_layers: rng.gen_range(1..=2),
            d_model: [8, 16][rng.gen_range(0..2)],
            d_ffn: 16,
            n_heads: 2,
            vocab_src: 12,
            vocab_tgt: 12,
            dropout: 0.1,
            max_len: 16,
        };
        let m = ModelBundle::new(cfg, i, false)?;
        let src: Vec<usize> = (0..rng.gen_range(2..8)).map(|_| rng.gen_range(4..12)).collect();
        let len = rng.gen_range(3..9);
        let tgt: Vec<usize> = (0..len).map(|_| rng.gen_range(4..12)).collect();
        let k = rng.gen_range(0..len);
        let mut changed = tgt.clone();
        changed[k] = if tgt[k] == 11 { 4 } else { tgt[k] + 1 };

        let g = Graph::no_grad();
        let b = Binder::frozen(&g, &m);
        let s = PaddedSeqs::from_seqs([src.as_slice()], Vocab::PAD_ID);
        let enc = m.encode(&b, EncoderRole::Shared, &s, &mut Dropout::eval())?;
        let nmt = |y: &[usize]| -> Result<Array> {
            let t = PaddedSeqs::from_seqs([y], Vocab::PAD_ID);
            Ok(m.nmt_forward(&b, &enc, &t, &mut Dropout::eval())?.probs.value())
        };
        let (a, c) = (nmt(&tgt)?, nmt(&changed)?);
        let max_diff = |r: usize| a.row(r).iter().zip(c.row(r)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let prefix_same = (0..=k).all(|r| max_diff(r) <= 1e-12);
        let suffix_moves = (k + 1..=len).any(|r| max_diff(r) > 1e-9);
        causal_ok += (prefix_same && suffix_moves) as usize;

        // Mask one position, change an observed word to its right.
        let mpos = rng.gen_range(0..len - 1);
        let j = rng.gen_range(mpos + 1..len);
        let mut right = tgt.clone();
        right[j] = if tgt[j] == 11 { 4 } else { tgt[j] + 1 };
        let cmlm = |y: &[usize]| -> Result<Vec<f64>> {
            let t = PaddedSeqs::from_seqs([y], Vocab::PAD_ID);
            let mb = MaskedBatch::new(&t, vec![vec![mpos]])?;
            Ok(m.cmlm_forward(&b, &enc, &mb, &mut Dropout::eval())?.probs.value().into_data())
        };
        let (p, q) = (cmlm(&tgt)?, cmlm(&right)?);
        bidir_ok += (p.iter().zip(&q).any(|(x, y)| (x - y).abs() > 1e-9)) as usize;
    }

    let mut counts = [0.0f64; 10];
    let draws = 100_000;
    for _ in 0..draws {
        counts[sample_cmlm_mask(10, &mut rng).len() - 1] += 1.0;
    }
    let expected = draws as f64 / 10.0;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(9.0)?.cdf(chi2);
    outcome(
        causal_ok == 100 && bidir_ok == 100 && p > 0.01,
        format!("causality witness {causal_ok}/100, bidirectionality witness {bidir_ok}/100; mask-count chi2 = {chi2:.2}, p = {p:.3} (> 0.01)"),
    )
}

// ---------------------------------------------------------------- criteria 5 and 6

struct DeskScale {
    results: Vec<SeedResult>,
    seconds: f64,
}

fn run_desk_scale() -> Result<DeskScale> {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let mut base = desk_config()?;
    base.data.dir = dir.path().join("data").to_string_lossy().into_owned();
    gen_data(&base)?;
    let mut results = Vec::new();
    for seed in 1..=5 {
        base.train.seed = seed;
        let r = run_seed(&base, dir.path())?;
        println!(
            "    seed {seed}: BLEU cbkd {:.2} / multi-only {:.2} / plain {:.2}; low-confidence mass {:.2}% -> {:.2}% ({:.0}s)",
            r.bleu_cbkd,
            r.bleu_multi,
            r.bleu_plain,
            r.confidence_plain.mass_below(0.5),
            r.confidence_cbkd.mass_below(0.5),
            r.seconds
        );
        results.push(r);
    }
    Ok(DeskScale {
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_desk_bleu(d: &DeskScale) -> Result<Outcome> {
    let cbkd = mean(d.results.iter().map(|r| r.bleu_cbkd));
    let multi = mean(d.results.iter().map(|r| r.bleu_multi));
    let plain = mean(d.results.iter().map(|r| r.bleu_plain));
    let ordered = cbkd >= multi && multi >= plain;
    let gain = cbkd - plain;
    outcome(
        ordered && gain > 0.0 && d.seconds < 3600.0,
        format!(
            "mean test BLEU over 5 seeds: cbkd {cbkd:.2}, multi-only {multi:.2}, plain {plain:.2}; ordering holds {ordered}; cbkd - plain = {gain:+.2}; {:.0}s (< 3600s)",
            d.seconds
        ),
    )
}

fn mean_report(rs: &[&ConfidenceReport]) -> Vec<f64> {
    (0..rs[0].percentages.len())
        .map(|i| mean(rs.iter().map(|r| r.percentages[i])))
        .collect()
}

fn criterion_confidence_shift(d: &DeskScale) -> Result<Outcome> {
    let before = mean_report(&d.results.iter().map(|r| &r.confidence_plain).collect::<Vec<_>>());
    let after = mean_report(&d.results.iter().map(|r| &r.confidence_cbkd).collect::<Vec<_>>());
    let edges = &d.results[0].confidence_plain.edges;
    let below = |p: &[f64]| (0..p.len()).filter(|&i| edges[i + 1] <= 0.5).map(|i| p[i]).sum::<f64>();
    let (b, a) = (below(&before), below(&after));
    let fmt = |p: &[f64]| p.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" / ");
    outcome(
        a < b,
        format!(
            "gold-token mass below 0.5: plain {b:.2}% -> cbkd {a:.2}%; plain [{}], cbkd [{}]",
            fmt(&before),
            fmt(&after)
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn seqkd(args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_seqkd"))
        .args(args)
        .env_remove("SEQKD_SEED")
        .env_remove("SEQKD_RUN_DIR")
        .output()?;
    ensure!(
        out.status.success(),
        "seqkd {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

const TINY: &str = r#"
[model]
encoder_layers = 1
decoder_layers = 1
d_model = 16
d_ffn = 32
n_heads = 2
max_len = 16

[train]
stage1_steps = 400
stage2_steps = 200
warmup_steps = 50
token_budget = 64
validate_every = 100
checkpoint_every = 100

[data]
alphabet = 8
min_len = 3
max_len = 8
train_size = 300
valid_size = 30
test_size = 30

[eval]
beam_size = 2
"#;

fn criterion_ablations() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY)?;
    let cfg = cfg.to_str().unwrap();
    let data = root.join("data");
    let data = data.to_str().unwrap();
    let run_of = |name: &str| root.join(name).to_string_lossy().into_owned();
    seqkd(&["gen-data", "-c", cfg, "--data.dir", data])?;

    let shared = run_of("shared");
    seqkd(&["train-stage1", "-c", cfg, "--data.dir", data, "--run.dir", &shared])?;
    let separate = run_of("no-share-enc");
    seqkd(&["train-stage1", "-c", cfg, "--data.dir", data, "--run.dir", &separate, "--train.share_encoder", "false"])?;
    let shared_ckpt = format!("{shared}/checkpoints/stage1/final.ckpt");

    let ablations: [(&str, Vec<&str>); 8] = [
        ("cbkd", vec![]),
        ("no-share-enc", vec![]),
        ("no-cbkd", vec!["--cbkd", "false"]),
        ("random", vec!["--strategy", "random"]),
        ("nmt-high", vec!["--strategy", "nmt-high"]),
        ("nmt-wrong", vec!["--strategy", "nmt-wrong"]),
        ("all-at-once", vec!["--strategy", "all-at-once"]),
        ("part-to-all", vec!["--strategy", "part-to-all"]),
    ];
    let mut lines = Vec::new();
    for (name, extra) in &ablations {
        let run = run_of(name);
        let mut args = vec!["train-stage2", "-c", cfg, "--data.dir", data, "--run.dir", &run];
        if *name != "no-share-enc" {
            args.extend(["--from", &shared_ckpt]);
        }
        args.extend(extra.iter().copied());
        seqkd(&args)?;
        seqkd(&["evaluate", "-c", cfg, "--data.dir", data, "--run.dir", &run])?;
        let base = format!("{run}/checkpoints/stage1/final.ckpt");
        let baseline = if *name == "no-share-enc" { base.as_str() } else { shared_ckpt.as_str() };
        seqkd(&["analyze-confidence", "-c", cfg, "--data.dir", data, "--run.dir", &run, "--baseline", baseline])?;
        let bleu: serde_json::Value = serde_json::from_str(&fs::read_to_string(format!("{run}/reports/bleu.test.json"))?)?;
        let conf = fs::read_to_string(format!("{run}/reports/confidence_delta.test.txt"))?;
        ensure!(conf.contains("delta"), "{name}: no delta table");
        ensure!(Path::new(&format!("{run}/reports/confidence.test.jsonl")).exists(), "{name}: no records");
        lines.push(format!("{name} {:.2}", bleu["bleu"].as_f64().context("bleu missing")?));
    }

    let dump = fs::read_to_string(format!("{}/reports/mask_plans.tsv", run_of("all-at-once")))?;
    let mut records = 0;
    let mut leaks = 0;
    for l in dump.lines() {
        let r: MaskPlanRecord = l.parse()?;
        records += 1;
        let full = r.subsets == vec![(0..r.len).collect::<Vec<_>>()];
        if !full || r.cmlm_observed.iter().any(|&o| o != 0) {
            leaks += 1;
        }
    }
    let sep = Checkpoint::load(Path::new(&format!("{separate}/checkpoints/stage1/final.ckpt")))?;
    outcome(
        records > 0 && leaks == 0 && sep.bundle.has_separate_nmt_encoder(),
        format!(
            "8 stage-2 runs via the CLI with BLEU and confidence reports ({}); all-at-once dump: {records} records, {leaks} with observed target tokens",
            lines.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_schedules() -> Result<Outcome> {
    let total = 5000;
    let alpha_ok = alpha_at(0, total) == 1.0 && alpha_at(total, total) == 0.0 && alpha_at(total / 2, total) == 0.5;
    let mut lr_ok = true;
    let mut worst = 0.0f64;
    for (d, w) in [(512, 4000), (64, 400), (64, 4000)] {
        let peak = lr_at(w, d, w)?;
        lr_ok &= lr_at(w - 1, d, w)? < peak && lr_at(w + 1, d, w)? < peak;
        let ratio = lr_at(2 * w, d, w)? / peak;
        worst = worst.max((ratio - 0.5f64.sqrt()).abs());
    }
    outcome(
        alpha_ok && lr_ok && worst < 1e-12,
        format!("alpha endpoints and midpoint exact: {alpha_ok}; lr peaks at warmup: {lr_ok}; |lr(2w)/lr(w) - 2^-0.5| = {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- criterion 9

fn sequence_score(m: &ModelBundle, src: &[usize], words: &[usize]) -> Result<f64> {
    let g = Graph::no_grad();
    let b = Binder::frozen(&g, m);
    let s = PaddedSeqs::from_seqs([src], Vocab::PAD_ID);
    let t = PaddedSeqs::from_seqs([words], Vocab::PAD_ID);
    let enc = m.encode(&b, EncoderRole::Nmt, &s, &mut Dropout::eval())?;
    let out = m.nmt_forward(&b, &enc, &t, &mut Dropout::eval())?;
    let probs = out.probs.value();
    let banned = [Vocab::PAD_ID, Vocab::BOS_ID, Vocab::MASK_ID];
    let lp: f64 = gold_targets(&out.teacher)
        .iter()
        .map(|tg| {
            let row = probs.row(tg.row);
            let z: f64 = (0..row.len()).filter(|v| !banned.contains(v)).map(|v| row[v]).sum();
            (row[tg.gold] / z).ln()
        })
        .sum();
    Ok(lp / (words.len() + 1) as f64)
}

fn exhaustive_matches(words: usize, max_words: usize, seed: u64) -> Result<bool> {
    let vocab = Vocab::RESERVED + words;
    let cfg = ModelConfig {
        vocab_tgt: vocab,
        ..toy_model_config()
    };
    let mut m = ModelBundle::new(cfg, seed, false)?;
    let proj = m.store().find("nmt_dec.proj").context("projection")?;
    for w in m.store_mut().value_mut(proj).data_mut() {
        *w *= 4.0;
    }
    let src = [4, 6, 5];
    let mut seqs: Vec<Vec<usize>> = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_words {
        frontier = frontier
            .iter()
            .flat_map(|p| (Vocab::RESERVED..vocab).map(move |w| [p.clone(), vec![w]].concat()))
            .collect();
        seqs.extend(frontier.iter().cloned());
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for s in seqs {
        let sc = sequence_score(&m, &src, &s)?;
        if sc > best.0 {
            best = (sc, s);
        }
    }
    let h = beam_search(&m, &src, 10_000, max_words + 1)?;
    Ok(h.finished && h.tokens == best.1 && (h.score - best.0).abs() < 1e-9)
}

fn criterion_determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let cfg_path = dir.path().join("tiny.toml");
    fs::write(&cfg_path, TINY)?;
    let data = dir.path().join("data").to_string_lossy().into_owned();
    let load = |run: &str| {
        ExperimentConfig::resolve(
            Some(&cfg_path),
            &[],
            &[("data.dir".into(), data.clone()), ("run.dir".into(), dir.path().join(run).to_string_lossy().into_owned())],
        )
    };
    let (a, b) = (load("a")?, load("b")?);
    gen_data(&a)?;
    for c in [&a, &b] {
        train_stage1(c, false)?;
        train_stage2(c, None, false)?;
    }
    let log = |c: &ExperimentConfig| fs::read(RunDir::new(&c.run.dir).metrics());
    let same_logs = log(&a)? == log(&b)? && !log(&a)?.is_empty();

    // Mid-run resume against an uninterrupted run, both stages.
    let corpus = seqkd::cli::Corpus::load(Path::new(&data))?;
    let mut model = a.model.clone();
    model.vocab_src = corpus.vocab.len();
    model.vocab_tgt = corpus.vocab.len();
    let mut resume_ok = true;
    for stage in [1u8, 2] {
        let start = || -> Result<Trainer> {
            Ok(match stage {
                1 => Trainer::stage1(model.clone(), a.train.clone())?,
                _ => {
                    let ck = Checkpoint::load(&RunDir::new(&a.run.dir).checkpoints(1).join("final.ckpt"))?;
                    Trainer::stage2(ck, a.train.clone())?
                }
            })
        };
        let mut full = start()?;
        let mut out_full = RunOutputs::default();
        full.run(&corpus.train, &corpus.valid, &mut out_full, None)?;
        let mut part = start()?;
        let mut out = RunOutputs::default();
        part.run(&corpus.train, &corpus.valid, &mut out, Some(7))?;
        let p = dir.path().join(format!("mid{stage}.ckpt"));
        part.checkpoint().save(&p)?;
        let mut resumed = Trainer::resume(Checkpoint::load(&p)?)?;
        resumed.run(&corpus.train, &corpus.valid, &mut out, None)?;
        resume_ok &= out.metrics.lines == out_full.metrics.lines && resumed.checkpoint() == full.checkpoint();
    }

    let trained = Checkpoint::load(&RunDir::new(&a.run.dir).checkpoints(2).join("final.ckpt"))?.bundle;
    let mut greedy_ok = 0;
    for p in &corpus.test {
        let limit = decode_limit(&trained, p.src.len(), 10);
        let beam = beam_search(&trained, &p.src, 1, limit)?;
        let greedy = greedy_decode(&trained, &p.src, limit)?;
        greedy_ok += (beam.tokens == greedy.tokens && beam.finished == greedy.finished) as usize;
    }
    let mut exhaustive_ok = 0;
    for seed in 0..5 {
        exhaustive_ok += exhaustive_matches(3, 2, seed)? as usize;
        exhaustive_ok += exhaustive_matches(2, 3, seed)? as usize;
    }
    let twice: Vec<EncodedPair> = corpus.test.clone();
    let r1 = seqkd::eval::confidence_histogram(&trained, &twice, &a.eval.confidence_edges, 256)?;
    let r2 = seqkd::eval::confidence_histogram(&trained, &twice, &a.eval.confidence_edges, 64)?;
    outcome(
        same_logs && resume_ok && greedy_ok == corpus.test.len() && exhaustive_ok == 10 && r1 == r2,
        format!(
            "identical metrics logs {same_logs}; resume bit-identical {resume_ok}; beam 1 = greedy on {greedy_ok}/{} sentences; wide beam = exhaustive on {exhaustive_ok}/10 models; confidence report reproducible {}",
            corpus.test.len(),
            r1 == r2
        ),
    )
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match result {
        Ok(Ok(o)) => (o.pass, o.detail),
        Ok(Err(e)) => (false, format!("error: {e:#}")),
        Err(_) => (false, "panicked".to_string()),
    };
    println!("criterion {n} [{name}]: {} ({secs:.1}s) {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    // `cargo test` passes harness flags; only a name filter is honoured.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |n: usize| filter.as_ref().map_or(true, |f| f.split(',').any(|x| x == n.to_string()));
    let mut ok = true;
    if wanted(1) {
        ok &= report(1, "gradient checks", criterion_gradients);
    }
    if wanted(2) {
        ok &= report(2, "reduction identities", criterion_reductions);
    }
    if wanted(3) {
        ok &= report(3, "selection oracles", criterion_selection);
    }
    if wanted(4) {
        ok &= report(4, "architecture contracts", criterion_architecture);
    }
    if wanted(5) || wanted(6) {
        println!("running the desk-scale comparison (5 seeds)...");
        match catch_unwind(AssertUnwindSafe(run_desk_scale)) {
            Ok(Ok(d)) => {
                if wanted(5) {
                    ok &= report(5, "desk-scale BLEU ordering", || criterion_desk_bleu(&d));
                }
                if wanted(6) {
                    ok &= report(6, "confidence shift", || criterion_confidence_shift(&d));
                }
            }
            other => {
                let why = match other {
                    Ok(Err(e)) => format!("error: {e:#}"),
                    _ => "panicked".into(),
                };
                for (n, name) in [(5, "desk-scale BLEU ordering"), (6, "confidence shift")] {
                    if wanted(n) {
                        println!("criterion {n} [{name}]: FAIL {why}");
                        ok = false;
                    }
                }
            }
        }
    }
    if wanted(7) {
        ok &= report(7, "ablation harness", criterion_ablations);
    }
    if wanted(8) {
        ok &= report(8, "schedules", criterion_schedules);
    }
    if wanted(9) {
        ok &= report(9, "determinism and persistence", criterion_determinism);
    }
    if !ok {
        std::process::exit(1);
    }
}
